#include "icsfuzz/protocol.hpp"

#include <algorithm>
#include <cassert>
#include <fstream>
#include <sstream>

namespace icsfuzz::proto {

// ---------------------------------------------------------------------------
// Schema helpers
// ---------------------------------------------------------------------------

bool ValueClass::contains(uint64_t v) const {
    for (const auto& [lo, hi] : intervals) {
        if (v >= lo && v <= hi) return true;
    }
    return false;
}

const FieldDescriptor* ProtocolSpec::find_field(const std::string& name) const {
    for (const auto& f : fields) {
        if (f.name == name) return &f;
    }
    return nullptr;
}

const VariantLayout* ProtocolSpec::variant_for(uint64_t discriminator_value) const {
    for (const auto& v : variants) {
        for (uint64_t w : v.when_values) {
            if (w == discriminator_value) return &v;
        }
    }
    return nullptr;
}

const VariantLayout* ProtocolSpec::find_variant(const std::string& name) const {
    for (const auto& v : variants) {
        if (v.name == name) return &v;
    }
    return nullptr;
}

std::vector<const FieldDescriptor*> ProtocolSpec::layout(const VariantLayout* variant) const {
    std::vector<const FieldDescriptor*> out;
    for (const auto& name : base_order) out.push_back(find_field(name));
    if (variant) {
        for (const auto& name : variant->field_names) out.push_back(find_field(name));
    }
    return out;
}

uint64_t Frame::int_value(const std::string& name) const {
    return std::get<uint64_t>(values.at(name));
}

const Bytes& Frame::bytes_value(const std::string& name) const {
    return std::get<Bytes>(values.at(name));
}

bool same_values(const Frame& a, const Frame& b) {
    return a.spec_id == b.spec_id && a.values == b.values;
}

// ---------------------------------------------------------------------------
// Bit-level IO (MSB-first; little-endian only for byte-aligned widths)
// ---------------------------------------------------------------------------

namespace {

class BitWriter {
public:
    void write_int(uint64_t value, uint32_t bits, bool little_endian) {
        if (little_endian) {
            for (uint32_t i = 0; i < bits / 8; ++i) {
                write_bits((value >> (8 * i)) & 0xFF, 8);
            }
        } else {
            write_bits(value, bits);
        }
    }

    void write_bytes(const Bytes& data) {
        assert(bit_pos_ == 0);
        out_.insert(out_.end(), data.begin(), data.end());
    }

    size_t byte_size() const { return out_.size() + (bit_pos_ ? 1 : 0); }
    Bytes take() { return std::move(out_); }

private:
    void write_bits(uint64_t value, uint32_t bits) {
        for (int i = static_cast<int>(bits) - 1; i >= 0; --i) {
            uint8_t bit = (value >> i) & 1;
            if (bit_pos_ == 0) out_.push_back(0);
            out_.back() |= static_cast<uint8_t>(bit << (7 - bit_pos_));
            bit_pos_ = (bit_pos_ + 1) % 8;
        }
    }

    Bytes out_;
    uint32_t bit_pos_ = 0;
};

class BitReader {
public:
    explicit BitReader(const Bytes& data) : data_(data) {}

    size_t remaining_bits() const { return data_.size() * 8 - pos_; }
    size_t remaining_bytes() const { return remaining_bits() / 8; }

    uint64_t read_int(uint32_t bits, bool little_endian) {
        if (little_endian) {
            uint64_t v = 0;
            for (uint32_t i = 0; i < bits / 8; ++i) {
                v |= read_bits(8) << (8 * i);
            }
            return v;
        }
        return read_bits(bits);
    }

    Bytes read_bytes(size_t n) {
        assert(pos_ % 8 == 0);
        size_t start = pos_ / 8;
        n = std::min(n, data_.size() - start);
        Bytes out(data_.begin() + start, data_.begin() + start + n);
        pos_ += n * 8;
        return out;
    }

private:
    uint64_t read_bits(uint32_t bits) {
        uint64_t v = 0;
        for (uint32_t i = 0; i < bits; ++i) {
            size_t byte = pos_ / 8;
            uint32_t off = pos_ % 8;
            v = (v << 1) | ((data_[byte] >> (7 - off)) & 1);
            ++pos_;
        }
        return v;
    }

    const Bytes& data_;
    size_t pos_ = 0;
};

uint64_t width_mask(uint32_t bits) {
    return bits >= 64 ? ~0ULL : ((1ULL << bits) - 1);
}

// One emitted layout item with its resolved bit size.
struct LayoutItem {
    const FieldDescriptor* field;
    bool present;
    size_t bit_size;
};

size_t value_bit_size(const FieldDescriptor& f, const Frame& frame) {
    if (f.is_bytes()) {
        auto it = frame.values.find(f.name);
        if (it == frame.values.end()) return 0;
        return std::get<Bytes>(it->second).size() * 8;
    }
    return f.width_bits;
}

/// Walks the layout and computes each length-of field's measured value, in
/// bytes, from the frame's current contents (the unparsed tail counts).
std::map<std::string, uint64_t> measure_lengths(const Frame& frame, const ProtocolSpec& spec,
                                                const VariantLayout* variant) {
    auto fields = spec.layout(variant);
    size_t base_bits = 0, total_bits = 0;
    std::map<std::string, size_t> end_bit;
    for (size_t i = 0; i < fields.size(); ++i) {
        const auto* f = fields[i];
        if (!frame.has(f->name) && !f->is_length()) continue;
        size_t bits = value_bit_size(*f, frame);
        if (f->is_length() && !frame.has(f->name)) bits = f->width_bits;
        total_bits += bits;
        end_bit[f->name] = total_bits;
        if (i < spec.base_order.size()) base_bits = total_bits;
    }
    size_t unparsed_bits = 0;
    if (auto it = frame.values.find(kUnparsedField); it != frame.values.end()) {
        unparsed_bits = std::get<Bytes>(it->second).size() * 8;
    }
    total_bits += unparsed_bits;

    std::map<std::string, uint64_t> out;
    for (const auto* f : fields) {
        if (!f->is_length()) continue;
        int64_t measured = 0;
        switch (f->length_target) {
            case LengthTarget::Rest: {
                auto it = end_bit.find(f->name);
                size_t end = it != end_bit.end() ? it->second : 0;
                measured = static_cast<int64_t>((total_bits - end) / 8);
                break;
            }
            case LengthTarget::Frame:
                measured = static_cast<int64_t>(total_bits / 8);
                break;
            case LengthTarget::Tail:
                measured = static_cast<int64_t>((total_bits - base_bits) / 8);
                break;
            case LengthTarget::Field: {
                auto it = frame.values.find(f->length_field);
                if (it != frame.values.end() && std::holds_alternative<Bytes>(it->second)) {
                    measured = static_cast<int64_t>(std::get<Bytes>(it->second).size());
                }
                break;
            }
        }
        measured += f->length_adjust;
        out[f->name] = measured < 0 ? 0 : static_cast<uint64_t>(measured);
    }
    return out;
}

const VariantLayout* select_variant(const Frame& frame, const ProtocolSpec& spec) {
    if (spec.discriminator.empty() || !frame.has(spec.discriminator)) return nullptr;
    const auto& v = frame.values.at(spec.discriminator);
    if (!std::holds_alternative<uint64_t>(v)) return nullptr;
    return spec.variant_for(std::get<uint64_t>(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// Decode
// ---------------------------------------------------------------------------

Result<Frame, DecodeError> decode_frame(const Bytes& bytes, const ProtocolSpec& spec) {
    using Kind = DecodeError::Kind;
    if (bytes.empty()) return DecodeError{Kind::TooShort, "empty input"};

    BitReader reader(bytes);
    Frame frame;
    frame.spec_id = spec.protocol_id;

    auto read_field = [&](const FieldDescriptor& f) -> std::optional<DecodeError> {
        if (f.is_bytes()) {
            if (reader.remaining_bytes() < f.range_lo) {
                return DecodeError{Kind::TooShort, "bytes end mid-field: " + f.name};
            }
            frame.values[f.name] = reader.read_bytes(f.range_lo);
            return std::nullopt;
        }
        if (reader.remaining_bits() < f.width_bits) {
            return DecodeError{Kind::TooShort, "bytes end mid-field: " + f.name};
        }
        frame.values[f.name] = reader.read_int(f.width_bits, f.little_endian);
        return std::nullopt;
    };

    // Base section. Single-value enum fields act as structural magic: a
    // mismatch means this is not a frame of this spec at all.
    for (const auto& name : spec.base_order) {
        const auto* f = spec.find_field(name);
        if (auto err = read_field(*f)) return *err;
        if (f->domain == DomainKind::EnumValues && f->enum_values.size() == 1 &&
            frame.int_value(name) != f->enum_values[0]) {
            return DecodeError{Kind::UnknownLayout, "magic mismatch on field " + name};
        }
    }

    const VariantLayout* variant = select_variant(frame, spec);
    if (variant) {
        const auto& names = variant->field_names;
        for (size_t i = 0; i < names.size(); ++i) {
            const auto* f = spec.find_field(names[i]);
            bool last = (i + 1 == names.size());
            if (!f->is_bytes()) {
                if (reader.remaining_bits() < f->width_bits) {
                    return DecodeError{Kind::TooShort, "bytes end mid-field: " + f->name};
                }
                frame.values[f->name] = reader.read_int(f->width_bits, f->little_endian);
                continue;
            }
            size_t len;
            if (f->fixed_size_bytes()) {
                if (reader.remaining_bytes() < f->range_lo) {
                    return DecodeError{Kind::TooShort, "bytes end mid-field: " + f->name};
                }
                len = f->range_lo;
            } else if (last) {
                len = reader.remaining_bytes();
            } else {
                // Governed by an earlier length-of field; lenient clamp.
                int64_t governed = 0;
                for (const auto* g : spec.layout(variant)) {
                    if (g->is_length() && g->length_target == LengthTarget::Field &&
                        g->length_field == f->name && frame.has(g->name)) {
                        governed = static_cast<int64_t>(frame.int_value(g->name)) - g->length_adjust;
                        break;
                    }
                }
                if (governed < 0) governed = 0;
                len = std::min(static_cast<size_t>(governed), reader.remaining_bytes());
            }
            frame.values[f->name] = reader.read_bytes(len);
        }
    }

    if (size_t rest = reader.remaining_bytes(); rest > 0) {
        frame.values[kUnparsedField] = reader.read_bytes(rest);
    }

    // A length-of field whose declared value disagrees with the measured one is
    // pinned so re-encoding reproduces the original bytes.
    auto measured = measure_lengths(frame, spec, variant);
    for (const auto& [name, expect] : measured) {
        if (frame.has(name) && frame.int_value(name) != expect) frame.pinned.insert(name);
    }

    frame.raw = bytes;
    return frame;
}

// ---------------------------------------------------------------------------
// Encode
// ---------------------------------------------------------------------------

namespace {

Result<Bytes, EncodeError> encode_core(const Frame& frame, const ProtocolSpec& spec, bool strict,
                                       FuzzEncodeReport* report) {
    using Kind = EncodeError::Kind;
    const VariantLayout* variant = select_variant(frame, spec);
    auto fields = spec.layout(variant);

    std::vector<LayoutItem> items;
    for (const auto* f : fields) {
        LayoutItem item{f, frame.has(f->name), 0};
        if (!item.present && f->is_length()) item.present = true;  // derivable
        if (!item.present) {
            if (strict && f->mandatory) {
                return EncodeError{Kind::MissingField, "missing mandatory field: " + f->name};
            }
            if (report) report->missing_fields.push_back(f->name);
            items.push_back(item);
            continue;
        }
        item.bit_size = f->is_length() ? f->width_bits : value_bit_size(*f, frame);
        items.push_back(item);
    }

    auto lengths = measure_lengths(frame, spec, variant);

    BitWriter writer;
    size_t offset = 0;
    for (const auto& item : items) {
        if (!item.present) continue;
        const auto& f = *item.field;
        if (f.is_bytes()) {
            const Bytes& data = frame.bytes_value(f.name);
            writer.write_bytes(data);
            if (report) report->extents.push_back({f.name, {offset, data.size()}});
            offset += data.size();
            continue;
        }
        uint64_t value;
        if (f.is_length()) {
            bool keep = frame.pinned.count(f.name) > 0 && frame.has(f.name);
            value = keep ? frame.int_value(f.name) : lengths.at(f.name);
        } else {
            value = frame.int_value(f.name);
        }
        if (f.width_bits < 64 && value > width_mask(f.width_bits)) {
            if (strict) {
                return EncodeError{Kind::ValueOutOfWidth,
                                   "value does not fit field width: " + f.name};
            }
            value &= width_mask(f.width_bits);
            if (report) report->truncated_fields.push_back(f.name);
        }
        writer.write_int(value, f.width_bits, f.little_endian);
        if (report) report->extents.push_back({f.name, {offset, f.width_bits / 8}});
        offset += f.width_bits / 8;
    }

    if (auto it = frame.values.find(kUnparsedField); it != frame.values.end()) {
        const Bytes& tail = std::get<Bytes>(it->second);
        writer.write_bytes(tail);
        if (report) report->extents.push_back({kUnparsedField, {offset, tail.size()}});
    }
    return writer.take();
}

}  // namespace

Result<Bytes, EncodeError> encode_frame(const Frame& frame, const ProtocolSpec& spec) {
    return encode_core(frame, spec, /*strict=*/true, nullptr);
}

Bytes encode_frame_fuzz(const Frame& frame, const ProtocolSpec& spec, FuzzEncodeReport* report) {
    auto result = encode_core(frame, spec, /*strict=*/false, report);
    return result.value();  // fuzz mode is total
}

// ---------------------------------------------------------------------------
// Validate
// ---------------------------------------------------------------------------

ValidationReport validate_frame(const Frame& frame, const ProtocolSpec& spec) {
    ValidationReport report;
    auto add = [&](const std::string& field, std::string desc, const std::string& group) {
        report.violations.push_back({field, std::move(desc), group});
    };

    const VariantLayout* variant = select_variant(frame, spec);
    auto fields = spec.layout(variant);
    auto lengths = measure_lengths(frame, spec, variant);

    for (const auto* f : fields) {
        auto it = frame.values.find(f->name);
        if (it == frame.values.end()) {
            if (f->mandatory && !f->is_length()) {
                add(f->name, "missing mandatory field", f->name);
            }
            continue;
        }
        switch (f->domain) {
            case DomainKind::EnumValues: {
                uint64_t v = std::get<uint64_t>(it->second);
                bool ok = std::find(f->enum_values.begin(), f->enum_values.end(), v) !=
                          f->enum_values.end();
                if (!ok) add(f->name, "not in enumerated domain", f->name);
                break;
            }
            case DomainKind::IntegerRange: {
                uint64_t v = std::get<uint64_t>(it->second);
                if (v < f->range_lo || v > f->range_hi) {
                    add(f->name,
                        "out of range [" + std::to_string(f->range_lo) + ".." +
                            std::to_string(f->range_hi) + "]",
                        f->name);
                }
                break;
            }
            case DomainKind::OpaqueBytes: {
                size_t n = std::get<Bytes>(it->second).size();
                if (n < f->range_lo || n > f->range_hi) {
                    add(f->name,
                        "length " + std::to_string(n) + " out of range [" +
                            std::to_string(f->range_lo) + ".." + std::to_string(f->range_hi) + "]",
                        f->name);
                }
                break;
            }
            case DomainKind::LengthOf: {
                uint64_t declared = std::get<uint64_t>(it->second);
                uint64_t actual = lengths.at(f->name);
                if (declared != actual) {
                    add(f->name,
                        "mismatch: declared " + std::to_string(declared) + ", actual " +
                            std::to_string(actual),
                        f->name);
                }
                break;
            }
        }
    }

    for (const auto& c : spec.constraints) {
        if (!variant || c.variant != variant->name) continue;
        if (!frame.has(c.lhs) || !frame.has(c.rhs)) continue;
        uint64_t rhs = frame.int_value(c.rhs);
        uint64_t expected =
            c.op == ConstraintOp::CeilDiv ? (rhs + c.k - 1) / c.k : rhs * c.k;
        uint64_t lhs = frame.int_value(c.lhs);
        if (lhs != expected) {
            add(c.lhs,
                c.name + ": declared " + std::to_string(lhs) + ", expected " +
                    std::to_string(expected),
                c.lhs);
        }
    }

    if (auto it = frame.values.find(kUnparsedField); it != frame.values.end()) {
        const Bytes& tail = std::get<Bytes>(it->second);
        if (!tail.empty()) {
            add(kUnparsedField,
                std::to_string(tail.size()) + " trailing bytes not covered by layout",
                kUnparsedField);
        }
    }

    report.valid = report.violations.empty();
    return report;
}

// ---------------------------------------------------------------------------
// Combos
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> enumerate_combos(const ProtocolSpec& spec) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : spec.fields) {
        for (const auto& c : f.value_classes) {
            out.emplace_back(f.name, c.name);
        }
    }
    return out;
}

std::optional<std::string> class_of(const FieldDescriptor& field, const FieldValue& value) {
    uint64_t v;
    if (std::holds_alternative<Bytes>(value)) {
        if (!field.is_bytes()) return std::nullopt;
        v = std::get<Bytes>(value).size();
    } else {
        if (field.is_bytes()) return std::nullopt;
        v = std::get<uint64_t>(value);
    }
    for (const auto& c : field.value_classes) {
        if (c.contains(v)) return c.name;
    }
    return std::nullopt;
}

FieldValue representative_value(const FieldDescriptor& field, const std::string& class_name) {
    for (const auto& c : field.value_classes) {
        if (c.name != class_name) continue;
        uint64_t lo = c.intervals.at(0).first;
        if (field.is_bytes()) return Bytes(static_cast<size_t>(lo), 0);
        return lo;
    }
    throw std::out_of_range("no class " + class_name + " on field " + field.name);
}

}  // namespace icsfuzz::proto
