#include "icsfuzz/seed_agent.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace icsfuzz::seedgen {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Capture readers
// ---------------------------------------------------------------------------

namespace {

uint32_t rd32(const Bytes& b, size_t off, bool swap) {
    uint32_t v = (uint32_t(b[off]) << 0) | (uint32_t(b[off + 1]) << 8) |
                 (uint32_t(b[off + 2]) << 16) | (uint32_t(b[off + 3]) << 24);
    if (swap) v = __builtin_bswap32(v);
    return v;
}

std::string ip_str(const uint8_t* p) {
    return std::to_string(p[0]) + "." + std::to_string(p[1]) + "." + std::to_string(p[2]) + "." +
           std::to_string(p[3]);
}

}  // namespace

Result<std::vector<RawCapture>, IngestError> read_pcap(const std::string& path,
                                                       const std::set<uint16_t>& target_ports) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        return IngestError{IngestError::Kind::SourceUnavailable, "cannot open " + path};
    }
    Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 24) {
        return IngestError{IngestError::Kind::MalformedCaptureFile, "truncated pcap header"};
    }
    uint32_t magic = rd32(data, 0, false);
    bool swap;
    if (magic == 0xA1B2C3D4) {
        swap = false;
    } else if (magic == 0xD4C3B2A1) {
        swap = true;
    } else {
        return IngestError{IngestError::Kind::MalformedCaptureFile, "not a classic pcap"};
    }
    uint32_t link = rd32(data, 20, swap);
    if (link != 1) {
        return IngestError{IngestError::Kind::MalformedCaptureFile,
                           "unsupported link type " + std::to_string(link)};
    }

    std::vector<RawCapture> out;
    size_t off = 24;
    while (off + 16 <= data.size()) {
        uint32_t ts_sec = rd32(data, off, swap);
        uint32_t ts_usec = rd32(data, off + 4, swap);
        uint32_t incl = rd32(data, off + 8, swap);
        off += 16;
        if (off + incl > data.size()) {
            return IngestError{IngestError::Kind::MalformedCaptureFile, "record overruns file"};
        }
        const uint8_t* pkt = data.data() + off;
        off += incl;

        if (incl < 14 + 20 + 20) continue;
        if (pkt[12] != 0x08 || pkt[13] != 0x00) continue;  // IPv4 only
        size_t ihl = (pkt[14] & 0x0F) * 4;
        if (pkt[14 + 9] != 6) continue;  // TCP only
        const uint8_t* tcp = pkt + 14 + ihl;
        if (14 + ihl + 20 > incl) continue;
        uint16_t sport = static_cast<uint16_t>((tcp[0] << 8) | tcp[1]);
        uint16_t dport = static_cast<uint16_t>((tcp[2] << 8) | tcp[3]);
        size_t doff = (tcp[12] >> 4) * 4;
        size_t payload_off = 14 + ihl + doff;
        if (payload_off >= incl) continue;

        if (!target_ports.empty() && !target_ports.count(dport)) continue;

        RawCapture cap;
        cap.timestamp_us = int64_t(ts_sec) * 1000000 + ts_usec;
        cap.src_port = sport;
        cap.dst_port = dport;
        cap.src = ip_str(pkt + 14 + 12) + ":" + std::to_string(sport);
        cap.dst = ip_str(pkt + 14 + 16) + ":" + std::to_string(dport);
        cap.payload.assign(pkt + payload_off, pkt + incl);
        out.push_back(std::move(cap));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const RawCapture& a, const RawCapture& b) {
                         return a.timestamp_us < b.timestamp_us;
                     });
    return out;
}

Result<std::vector<RawCapture>, IngestError> read_hex_lines(const std::string& path,
                                                            uint16_t port) {
    std::ifstream in(path);
    if (!in) {
        return IngestError{IngestError::Kind::SourceUnavailable, "cannot open " + path};
    }
    std::vector<RawCapture> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        auto bytes = from_hex(line.substr(start));
        if (!bytes || bytes->empty()) {
            return IngestError{IngestError::Kind::MalformedCaptureFile,
                               "bad hex at line " + std::to_string(line_no)};
        }
        RawCapture cap;
        cap.timestamp_us = line_no;  // file order
        cap.dst_port = port;
        cap.src = "hexfile:0";
        cap.dst = "hexfile:" + std::to_string(port);
        cap.payload = std::move(*bytes);
        out.push_back(std::move(cap));
    }
    return out;
}

Result<std::vector<RawCapture>, IngestError> ingest_traffic(const std::string& path,
                                                            const std::set<uint16_t>& target_ports) {
    {
        std::ifstream probe(path, std::ios::binary);
        if (!probe) {
            return IngestError{IngestError::Kind::SourceUnavailable, "cannot open " + path};
        }
        uint32_t magic = 0;
        probe.read(reinterpret_cast<char*>(&magic), 4);
        if (probe.gcount() == 4 && (magic == 0xA1B2C3D4 || magic == 0xD4C3B2A1)) {
            return read_pcap(path, target_ports);
        }
    }
    uint16_t port = target_ports.empty() ? 0 : *target_ports.begin();
    return read_hex_lines(path, port);
}

// ---------------------------------------------------------------------------
// Extraction pipeline
// ---------------------------------------------------------------------------

json QuarantineRecord::to_json() const {
    return json{{"stage", stage}, {"reason", reason}, {"capture", capture_ref}};
}

uint64_t canonical_field_hash(const std::map<std::string, proto::FieldValue>& fields) {
    std::string canon;
    for (const auto& [name, value] : fields) {  // std::map iterates sorted
        canon += name;
        canon += '=';
        if (std::holds_alternative<uint64_t>(value)) {
            canon += std::to_string(std::get<uint64_t>(value));
        } else {
            canon += to_hex(std::get<Bytes>(value));
        }
        canon += ';';
    }
    return fnv1a(canon);
}

namespace {

/// Fields carried into a seed: everything decoded except session-ephemeral
/// fields (transaction ids and the like), which would defeat dedup.
std::map<std::string, proto::FieldValue> seed_field_map(const proto::Frame& frame,
                                                        const proto::ProtocolSpec& spec) {
    std::map<std::string, proto::FieldValue> out;
    for (const auto& [name, value] : frame.values) {
        if (name == proto::kUnparsedField) continue;
        const auto* fd = spec.find_field(name);
        if (!fd || fd->ephemeral) continue;
        out.emplace(name, value);
    }
    return out;
}

std::string seed_id_for(const std::map<std::string, proto::FieldValue>& fields) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "s-%012llx",
                  static_cast<unsigned long long>(canonical_field_hash(fields) & 0xFFFFFFFFFFFFULL));
    return buf;
}

}  // namespace

Result<Seed, QuarantineRecord> extract_seed(
    const RawCapture& capture, const std::map<uint16_t, const proto::ProtocolSpec*>& specs_by_port,
    const kb::KnowledgeStore& store, const std::string& capture_ref) {
    // Stage 1: identify the protocol by port, then confirm the magic bytes.
    auto spec_it = specs_by_port.find(capture.dst_port);
    if (spec_it == specs_by_port.end()) {
        return QuarantineRecord{"identify",
                                "no protocol bound to port " + std::to_string(capture.dst_port),
                                capture_ref};
    }
    const proto::ProtocolSpec& spec = *spec_it->second;
    (void)store.retrieve("Protocol rules " + spec.protocol_id, 1);

    // Stage 2: structural decode.
    auto decoded = proto::decode_frame(capture.payload, spec);
    if (!decoded.ok()) {
        return QuarantineRecord{"decode", decoded.error().detail, capture_ref};
    }
    const proto::Frame& frame = decoded.value();

    // Stage 3: per-field validation in declaration order, consulting the rule
    // store for the implicated field before judging it.
    auto report = proto::validate_frame(frame, spec);
    if (!report.valid) {
        const auto& v = report.violations.front();
        std::string reason = v.field + ": " + v.description;
        auto rules = store.retrieve(spec.protocol_id + " " + v.field + " rule", 1);
        if (!rules.empty()) reason += " (rule: " + rules.front().entry.title + ")";
        return QuarantineRecord{"validate", reason, capture_ref};
    }

    // Stage 4: assemble.
    Seed seed;
    seed.protocol_id = spec.protocol_id;
    seed.fields = seed_field_map(frame, spec);
    if (seed.fields.empty()) {
        return QuarantineRecord{"assemble", "no seedable fields decoded", capture_ref};
    }
    seed.seed_id = seed_id_for(seed.fields);
    seed.provenance = "capture:" + capture_ref;
    seed.validation = report;
    return seed;
}

bus::BusMessage seed_message(const Seed& seed, const std::string& sender) {
    json fields = json::object();
    for (const auto& [name, value] : seed.fields) {
        if (std::holds_alternative<uint64_t>(value)) {
            fields[name] = std::get<uint64_t>(value);
        } else {
            fields[name] = to_hex(std::get<Bytes>(value));
        }
    }
    bus::BusMessage msg;
    msg.topic = "seed";
    msg.event = "seed";
    msg.sender = sender;
    msg.data = json{{"seed_id", seed.seed_id},
                    {"protocol_id", seed.protocol_id},
                    {"fields", fields},
                    {"provenance", seed.provenance}};
    return msg;
}

std::optional<Seed> seed_from_wire(const nlohmann::json& data) {
    Seed seed;
    try {
        seed.seed_id = data.at("seed_id").get<std::string>();
        seed.protocol_id = data.at("protocol_id").get<std::string>();
        seed.provenance = data.at("provenance").get<std::string>();
        for (const auto& [name, value] : data.at("fields").items()) {
            if (value.is_number_unsigned() || value.is_number_integer()) {
                seed.fields[name] = value.get<uint64_t>();
            } else if (value.is_string()) {
                auto bytes = from_hex(value.get<std::string>());
                if (!bytes) return std::nullopt;
                seed.fields[name] = std::move(*bytes);
            } else {
                return std::nullopt;
            }
        }
    } catch (const json::exception&) {
        return std::nullopt;
    }
    seed.validation.valid = true;
    return seed;
}

proto::Frame frame_from_seed(const Seed& seed, const proto::ProtocolSpec& spec) {
    proto::Frame frame;
    frame.spec_id = seed.protocol_id;
    for (const auto& [name, value] : seed.fields) frame.values[name] = value;

    const proto::VariantLayout* variant = nullptr;
    if (!spec.discriminator.empty() && frame.has(spec.discriminator)) {
        variant = spec.variant_for(frame.int_value(spec.discriminator));
    }
    for (const auto* fd : spec.layout(variant)) {
        if (frame.has(fd->name) || fd->is_length()) continue;
        if (fd->ephemeral) {
            frame.values[fd->name] =
                fd->domain == proto::DomainKind::EnumValues ? fd->enum_values[0] : fd->range_lo;
        }
    }
    return frame;
}

// ---------------------------------------------------------------------------
// Coverage synthesis
// ---------------------------------------------------------------------------

std::optional<Seed> synthesize_combo_seed(const proto::ProtocolSpec& spec,
                                          const std::string& field_name,
                                          const std::string& class_name) {
    const auto* target = spec.find_field(field_name);
    if (!target) return std::nullopt;

    // Choose a variant whose layout carries the field. Discriminator combos
    // pick their own variant; base-field combos default to the first variant.
    const proto::VariantLayout* variant = nullptr;
    if (field_name == spec.discriminator) {
        uint64_t v = std::get<uint64_t>(proto::representative_value(*target, class_name));
        variant = spec.variant_for(v);
    } else {
        bool in_base = std::find(spec.base_order.begin(), spec.base_order.end(), field_name) !=
                       spec.base_order.end();
        if (in_base) {
            variant = spec.variants.empty() ? nullptr : &spec.variants.front();
        } else {
            for (const auto& v : spec.variants) {
                if (std::find(v.field_names.begin(), v.field_names.end(), field_name) !=
                    v.field_names.end()) {
                    variant = &v;
                    break;
                }
            }
            if (!variant) return std::nullopt;
        }
    }

    proto::Frame frame;
    frame.spec_id = spec.protocol_id;
    if (variant && !spec.discriminator.empty()) {
        frame.values[spec.discriminator] = variant->when_values.front();
    }

    auto canonical = [](const proto::FieldDescriptor& f) -> proto::FieldValue {
        if (f.is_bytes()) return Bytes(static_cast<size_t>(f.range_lo), 0);
        if (f.domain == proto::DomainKind::EnumValues) return f.enum_values.front();
        return f.range_lo;
    };

    for (const auto* fd : spec.layout(variant)) {
        if (fd->is_length() || fd->name == spec.discriminator) continue;
        frame.values[fd->name] =
            fd->name == field_name ? proto::representative_value(*fd, class_name) : canonical(*fd);
    }
    if (target->name == spec.discriminator) {
        frame.values[field_name] = proto::representative_value(*target, class_name);
    }

    // Solve count relations so derived byte counts stay consistent.
    for (const auto& c : spec.constraints) {
        if (!variant || c.variant != variant->name) continue;
        const auto* lhs = spec.find_field(c.lhs);
        const auto* rhs = spec.find_field(c.rhs);
        if (!lhs || !rhs || !lhs->is_length()) continue;
        const auto* data_field = spec.find_field(lhs->length_field);
        if (!data_field || !data_field->is_bytes()) continue;

        if (field_name == data_field->name) {
            // data length pinned by the class: derive a count that matches it
            uint64_t len = std::get<Bytes>(frame.values[data_field->name]).size();
            uint64_t count;
            if (c.op == proto::ConstraintOp::Times) {
                count = (len + c.k - 1) / c.k;
                len = count * c.k;  // bump length to the next exact multiple
                auto cls = std::find_if(data_field->value_classes.begin(),
                                        data_field->value_classes.end(),
                                        [&](const auto& vc) { return vc.name == class_name; });
                if (cls == data_field->value_classes.end() || !cls->contains(len)) {
                    return std::nullopt;
                }
                frame.values[data_field->name] = Bytes(static_cast<size_t>(len), 0);
            } else {
                count = len * c.k - (c.k - 1);  // minimal count with ceil_div == len
            }
            if (count < rhs->range_lo || count > rhs->range_hi) return std::nullopt;
            if (frame.values.count(c.rhs) && field_name != c.rhs) {
                frame.values[c.rhs] = count;
            }
        } else {
            // count is set (target or canonical): size the data to match
            uint64_t count = frame.int_value(c.rhs);
            uint64_t len = c.op == proto::ConstraintOp::Times ? count * c.k
                                                              : (count + c.k - 1) / c.k;
            if (len < data_field->range_lo || len > data_field->range_hi) return std::nullopt;
            frame.values[data_field->name] = Bytes(static_cast<size_t>(len), 0);
        }
    }

    auto bytes = proto::encode_frame(frame, spec);
    if (!bytes.ok()) return std::nullopt;
    auto decoded = proto::decode_frame(bytes.value(), spec);
    if (!decoded.ok()) return std::nullopt;
    auto report = proto::validate_frame(decoded.value(), spec);
    if (!report.valid) return std::nullopt;

    Seed seed;
    seed.protocol_id = spec.protocol_id;
    seed.fields = seed_field_map(decoded.value(), spec);
    seed.seed_id = seed_id_for(seed.fields);
    seed.provenance = "synthetic";
    seed.validation = report;
    return seed;
}

// ---------------------------------------------------------------------------
// SeedAgent
// ---------------------------------------------------------------------------

SeedAgent::SeedAgent(Config config, bus::Bus& bus, const kb::KnowledgeStore& store,
                     std::map<uint16_t, const proto::ProtocolSpec*> specs_by_port)
    : config_(std::move(config)),
      bus_(bus),
      store_(store),
      specs_(std::move(specs_by_port)),
      pacer_(config_.agent_id, config_.heartbeat_interval_ms) {}

Result<size_t, IngestError> SeedAgent::load_source(const std::string& path) {
    auto result = ingest_traffic(path, config_.target_ports);
    if (!result.ok()) return result.error();
    pending_ = std::move(result.value());
    next_ = 0;
    return pending_.size();
}

bool SeedAgent::emit_seed(const Seed& seed) {
    uint64_t h = canonical_field_hash(seed.fields);
    if (!seen_hashes_.insert(h).second) return false;  // campaign-wide dedup
    bus_.publish(seed_message(seed, config_.agent_id));
    seeds_.push_back(seed);
    ++published_;
    return true;
}

size_t SeedAgent::step(int64_t now_ms, size_t budget) {
    pacer_.maybe_beat(bus_, now_ms);
    size_t done = 0;
    while (done < budget && next_ < pending_.size()) {
        const RawCapture& cap = pending_[next_];
        std::string ref = std::to_string(next_);
        auto result = extract_seed(cap, specs_, store_, ref);
        if (result.ok()) {
            emit_seed(result.value());
        } else {
            quarantine_.push_back(result.error());
        }
        ++next_;
        ++done;
    }
    return done;
}

size_t SeedAgent::augment(const proto::ProtocolSpec& spec) {
    std::set<std::pair<std::string, std::string>> covered;
    for (const auto& seed : seeds_) {
        if (seed.protocol_id != spec.protocol_id) continue;
        for (const auto& [name, value] : seed.fields) {
            const auto* fd = spec.find_field(name);
            if (!fd) continue;
            if (auto cls = proto::class_of(*fd, value)) covered.insert({name, *cls});
        }
    }
    size_t emitted = 0;
    for (const auto& [field, cls] : proto::enumerate_combos(spec)) {
        if (covered.count({field, cls})) continue;
        const auto* fd = spec.find_field(field);
        if (fd && fd->ephemeral) continue;  // covered by the session-assigned default
        auto seed = synthesize_combo_seed(spec, field, cls);
        if (!seed) continue;
        seed->seed_id = seed->seed_id + "-g" + std::to_string(synth_counter_++);
        if (emit_seed(*seed)) ++emitted;
    }
    return emitted;
}

}  // namespace icsfuzz::seedgen
