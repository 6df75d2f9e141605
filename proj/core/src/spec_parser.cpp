#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "icsfuzz/protocol.hpp"

namespace icsfuzz::proto {

namespace {

std::vector<std::string> tokenize(const std::string& line) {
    std::string cleaned;
    cleaned.reserve(line.size());
    for (char ch : line) {
        if (ch == ',' || ch == '(' || ch == ')' || ch == ':') {
            cleaned.push_back(' ');
        } else {
            cleaned.push_back(ch);
        }
    }
    std::istringstream in(cleaned);
    std::vector<std::string> tokens;
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    return tokens;
}

bool is_number(const std::string& s) {
    if (s.empty()) return false;
    size_t i = 0;
    if (s.rfind("0x", 0) == 0 || s.rfind("0X", 0) == 0) {
        if (s.size() == 2) return false;
        return s.find_first_not_of("0123456789abcdefABCDEF", 2) == std::string::npos;
    }
    return s.find_first_not_of("0123456789", i) == std::string::npos;
}

uint64_t parse_number(const std::string& s, int line) {
    if (!is_number(s)) throw SpecParseError(line, "expected a number, got '" + s + "'");
    return std::stoull(s, nullptr, 0);
}

std::pair<uint64_t, uint64_t> parse_range(const std::string& s, int line) {
    auto dots = s.find("..");
    if (dots == std::string::npos) throw SpecParseError(line, "expected lo..hi, got '" + s + "'");
    uint64_t lo = parse_number(s.substr(0, dots), line);
    uint64_t hi = parse_number(s.substr(dots + 2), line);
    if (lo > hi) throw SpecParseError(line, "range lower bound exceeds upper in '" + s + "'");
    return {lo, hi};
}

struct Parser {
    ProtocolSpec spec;
    VariantLayout* current_variant = nullptr;
    std::set<std::string> shared_names;
    std::set<std::string> used_shared;
    int line_no = 0;

    void fail(const std::string& msg) const { throw SpecParseError(line_no, msg); }

    void check_new_name(const std::string& name) {
        if (name.empty() || name[0] == '_') fail("invalid field name '" + name + "'");
        if (spec.find_field(name)) fail("duplicate field name '" + name + "'");
    }

    bool consume_attrs(FieldDescriptor& f, const std::vector<std::string>& t, size_t& i) {
        bool any = false;
        while (i < t.size() && (t[i] == "le" || t[i] == "ephemeral" || t[i] == "echo" ||
                                t[i] == "optional")) {
            if (t[i] == "le") {
                if (f.width_bits % 8 != 0) fail("little-endian needs byte-aligned width");
                f.little_endian = true;
            } else if (t[i] == "ephemeral") {
                f.ephemeral = true;
            } else if (t[i] == "echo") {
                f.echo = true;
            } else {
                f.mandatory = false;
            }
            ++i;
            any = true;
        }
        return any;
    }

    FieldDescriptor parse_field(const std::vector<std::string>& t, size_t& i) {
        FieldDescriptor f;
        f.name = t.at(i++);
        check_new_name(f.name);

        const std::string& type = t.at(i++);
        if (type == "bytes") {
            f.domain = DomainKind::OpaqueBytes;
            f.width_bits = 0;
            if (t.at(i++) != "len") fail("bytes field needs 'len lo..hi'");
            std::tie(f.range_lo, f.range_hi) = parse_range(t.at(i++), line_no);
        } else if (type.size() > 1 && type[0] == 'u' && is_number(type.substr(1))) {
            f.width_bits = static_cast<uint32_t>(parse_number(type.substr(1), line_no));
            if (f.width_bits == 0 || f.width_bits > 64) fail("field width must be 1..64 bits");
            consume_attrs(f, t, i);  // attributes may precede the domain
            const std::string& dom = t.at(i++);
            if (dom == "range") {
                f.domain = DomainKind::IntegerRange;
                std::tie(f.range_lo, f.range_hi) = parse_range(t.at(i++), line_no);
            } else if (dom == "enum") {
                f.domain = DomainKind::EnumValues;
                while (i < t.size() && is_number(t[i])) {
                    f.enum_values.push_back(parse_number(t[i++], line_no));
                }
                if (f.enum_values.empty()) fail("enum domain needs at least one value");
            } else if (dom == "lengthof") {
                f.domain = DomainKind::LengthOf;
                const std::string& target = t.at(i++);
                if (target == "rest") {
                    f.length_target = LengthTarget::Rest;
                } else if (target == "frame") {
                    f.length_target = LengthTarget::Frame;
                } else if (target == "tail") {
                    f.length_target = LengthTarget::Tail;
                } else {
                    f.length_target = LengthTarget::Field;
                    f.length_field = target;
                }
                if (i < t.size() && (t[i] == "plus" || t[i] == "minus")) {
                    bool neg = t[i] == "minus";
                    ++i;
                    int64_t k = static_cast<int64_t>(parse_number(t.at(i++), line_no));
                    f.length_adjust = neg ? -k : k;
                }
            } else {
                fail("unknown domain '" + dom + "'");
            }
        } else {
            fail("unknown field type '" + type + "'");
        }

        consume_attrs(f, t, i);

        if (i < t.size()) {
            if (t[i] != "classes") fail("unexpected token '" + t[i] + "'");
            ++i;
            while (i < t.size()) {
                auto eq = t[i].find('=');
                if (eq == std::string::npos) fail("class must be name=selector");
                ValueClass vc;
                vc.name = t[i].substr(0, eq);
                std::string sel = t[i].substr(eq + 1);
                if (sel == "*") {
                    vc.intervals.clear();  // resolved to the complement below
                } else if (sel.find("..") != std::string::npos) {
                    vc.intervals.push_back(parse_range(sel, line_no));
                } else {
                    uint64_t v = parse_number(sel, line_no);
                    vc.intervals.push_back({v, v});
                }
                f.value_classes.push_back(std::move(vc));
                ++i;
            }
        }
        finish_classes(f);
        return f;
    }

    /// Resolve '*' classes and check the partition covers the domain exactly.
    void finish_classes(FieldDescriptor& f) {
        std::vector<std::pair<uint64_t, uint64_t>> domain;
        if (f.domain == DomainKind::EnumValues) {
            for (uint64_t v : f.enum_values) domain.push_back({v, v});
        } else if (f.domain == DomainKind::LengthOf) {
            domain.push_back({0, f.width_bits >= 64 ? ~0ULL : (1ULL << f.width_bits) - 1});
        } else {
            domain.push_back({f.range_lo, f.range_hi});
        }

        if (f.value_classes.empty()) {
            f.value_classes.push_back({"any", domain});
            return;
        }

        // Explicit intervals must stay inside the domain and stay disjoint.
        auto in_domain = [&](uint64_t v) {
            for (const auto& [lo, hi] : domain) {
                if (v >= lo && v <= hi) return true;
            }
            return false;
        };
        ValueClass* star = nullptr;
        for (auto& vc : f.value_classes) {
            if (vc.intervals.empty()) {
                if (star) fail("only one '*' class allowed on " + f.name);
                star = &vc;
                continue;
            }
            for (const auto& [lo, hi] : vc.intervals) {
                if (!in_domain(lo) || !in_domain(hi)) {
                    fail("class " + vc.name + " leaves the domain of " + f.name);
                }
            }
        }
        auto covered_by_explicit = [&](uint64_t v) {
            for (const auto& vc : f.value_classes) {
                if (!vc.intervals.empty() && vc.contains(v)) return true;
            }
            return false;
        };
        // Disjointness: probe interval endpoints for double coverage.
        for (const auto& vc : f.value_classes) {
            for (const auto& [lo, hi] : vc.intervals) {
                int hits_lo = 0, hits_hi = 0;
                for (const auto& other : f.value_classes) {
                    if (other.contains(lo)) ++hits_lo;
                    if (other.contains(hi)) ++hits_hi;
                }
                if (hits_lo > 1 || hits_hi > 1) {
                    fail("classes on " + f.name + " overlap at a boundary");
                }
            }
        }
        if (star) {
            // Complement of the explicit classes within the domain.
            for (const auto& [dlo, dhi] : domain) {
                std::optional<uint64_t> run_start;
                uint64_t v = dlo;
                while (true) {
                    bool covered = covered_by_explicit(v);
                    if (!covered && !run_start) run_start = v;
                    if (covered && run_start) {
                        star->intervals.push_back({*run_start, v - 1});
                        run_start.reset();
                    }
                    if (v == dhi) break;
                    // Jump across wide uncovered stretches: find next explicit bound.
                    uint64_t next = dhi;
                    for (const auto& vc : f.value_classes) {
                        for (const auto& [lo, hi] : vc.intervals) {
                            if (lo > v && lo - 1 < next) next = lo - 1;
                            if (hi >= v && hi < next) next = hi;
                        }
                    }
                    v = next > v ? next : v + 1;
                }
                if (run_start) star->intervals.push_back({*run_start, dhi});
            }
            if (star->intervals.empty()) fail("'*' class on " + f.name + " is empty");
        } else {
            // Exhaustiveness: every domain point must be claimed. Check the
            // endpoints and the points adjacent to every class boundary.
            std::vector<uint64_t> probes;
            for (const auto& [dlo, dhi] : domain) {
                probes.push_back(dlo);
                probes.push_back(dhi);
            }
            for (const auto& vc : f.value_classes) {
                for (const auto& [lo, hi] : vc.intervals) {
                    probes.push_back(lo);
                    probes.push_back(hi);
                    if (hi != ~0ULL) probes.push_back(hi + 1);
                    if (lo != 0) probes.push_back(lo - 1);
                }
            }
            for (uint64_t p : probes) {
                if (in_domain(p) && !covered_by_explicit(p)) {
                    fail("classes on " + f.name + " do not cover the domain (value " +
                         std::to_string(p) + " unclaimed)");
                }
            }
        }
    }

    void handle_line(const std::vector<std::string>& t) {
        const std::string& kw = t[0];
        size_t i = 1;
        if (kw == "protocol") {
            spec.protocol_id = t.at(i);
        } else if (kw == "port") {
            spec.default_port = static_cast<uint16_t>(parse_number(t.at(i), line_no));
        } else if (kw == "field") {
            FieldDescriptor f = parse_field(t, i);
            if (current_variant) {
                current_variant->field_names.push_back(f.name);
            } else {
                spec.base_order.push_back(f.name);
            }
            spec.fields.push_back(std::move(f));
        } else if (kw == "shared") {
            if (current_variant) fail("'shared' not allowed inside a variant");
            FieldDescriptor f = parse_field(t, i);
            shared_names.insert(f.name);
            spec.fields.push_back(std::move(f));
        } else if (kw == "use") {
            if (!current_variant) fail("'use' only allowed inside a variant");
            const std::string& name = t.at(i);
            if (!shared_names.count(name)) fail("'use' references unknown shared field " + name);
            used_shared.insert(name);
            current_variant->field_names.push_back(name);
        } else if (kw == "variant") {
            if (current_variant) fail("nested variants are not supported");
            VariantLayout v;
            v.name = t.at(i++);
            if (t.at(i++) != "when") fail("variant needs 'when <field> in ...'");
            std::string disc = t.at(i++);
            if (!spec.discriminator.empty() && spec.discriminator != disc) {
                fail("all variants must key on the same discriminator field");
            }
            spec.discriminator = disc;
            if (t.at(i++) != "in") fail("variant needs 'when <field> in ...'");
            while (i < t.size() && is_number(t[i])) {
                v.when_values.push_back(parse_number(t[i++], line_no));
            }
            if (v.when_values.empty()) fail("variant selector list is empty");
            spec.variants.push_back(std::move(v));
            current_variant = &spec.variants.back();
        } else if (kw == "end") {
            if (!current_variant) fail("'end' without open variant");
            current_variant = nullptr;
        } else if (kw == "constraint") {
            CountConstraint c;
            c.name = t.at(i++);
            if (t.at(i++) != "in") fail("constraint needs 'in <variant>'");
            c.variant = t.at(i++);
            c.lhs = t.at(i++);
            if (t.at(i++) != "==") fail("constraint needs '=='");
            const std::string& op = t.at(i++);
            if (op == "ceil_div") {
                c.op = ConstraintOp::CeilDiv;
            } else if (op == "times") {
                c.op = ConstraintOp::Times;
            } else {
                fail("unknown constraint op '" + op + "'");
            }
            c.rhs = t.at(i++);
            c.k = parse_number(t.at(i++), line_no);
            if (c.k == 0) fail("constraint factor must be positive");
            spec.constraints.push_back(std::move(c));
        } else if (kw == "splice") {
            SplicePoint s;
            s.name = t.at(i++);
            const std::string& where = t.at(i++);
            if (where == "after") {
                s.after_field = t.at(i++);
            } else if (where == "at" && t.at(i) == "end") {
                s.at_end = true;
            } else {
                fail("splice needs 'after <field>' or 'at end'");
            }
            spec.splices.push_back(std::move(s));
        } else if (kw == "priority") {
            const std::string& name = t.at(i++);
            spec.priorities[name] = std::stod(t.at(i++));
        } else if (kw == "probe") {
            auto bytes = from_hex(t.at(i));
            if (!bytes) fail("probe payload is not valid hex");
            spec.probe = *bytes;
        } else {
            fail("unknown keyword '" + kw + "'");
        }
    }

    void cross_check() {
        line_no = 0;
        if (spec.protocol_id.empty()) fail("missing 'protocol' declaration");
        for (const auto& name : shared_names) {
            if (!used_shared.count(name)) fail("shared field '" + name + "' is never used");
        }
        std::set<uint64_t> seen;
        for (const auto& v : spec.variants) {
            for (uint64_t w : v.when_values) {
                if (!seen.insert(w).second) fail("variants overlap on selector value");
            }
        }
        if (!spec.discriminator.empty()) {
            const auto* disc = spec.find_field(spec.discriminator);
            if (!disc) fail("discriminator field does not exist");
            bool in_base = std::find(spec.base_order.begin(), spec.base_order.end(),
                                     spec.discriminator) != spec.base_order.end();
            if (!in_base) fail("discriminator must be a base field");
        }
        for (const auto& name : spec.base_order) {
            const auto* f = spec.find_field(name);
            if (f->is_bytes() && !f->fixed_size_bytes()) {
                fail("base field '" + name + "' must be fixed-size");
            }
        }
        for (const auto& v : spec.variants) {
            for (size_t i = 0; i < v.field_names.size(); ++i) {
                const auto* f = spec.find_field(v.field_names[i]);
                if (!f->is_bytes() || f->fixed_size_bytes()) continue;
                if (i + 1 == v.field_names.size()) continue;  // trailing takes the rest
                bool governed = false;
                for (const auto& g : spec.fields) {
                    if (g.is_length() && g.length_target == LengthTarget::Field &&
                        g.length_field == f->name) {
                        governed = true;
                    }
                }
                if (!governed) {
                    fail("variable field '" + f->name + "' needs a governing length field");
                }
            }
        }
        for (const auto& c : spec.constraints) {
            const auto* v = spec.find_variant(c.variant);
            if (!v) fail("constraint '" + c.name + "' references unknown variant " + c.variant);
            for (const auto& side : {c.lhs, c.rhs}) {
                if (!spec.find_field(side)) {
                    fail("constraint '" + c.name + "' references unknown field " + side);
                }
            }
        }
        for (const auto& s : spec.splices) {
            if (!s.at_end && !spec.find_field(s.after_field)) {
                fail("splice '" + s.name + "' references unknown field " + s.after_field);
            }
        }
        for (const auto& [name, w] : spec.priorities) {
            if (!spec.find_field(name)) fail("priority hint references unknown field " + name);
            if (w < 0) fail("priority must be >= 0");
        }
        if (auto it = std::find_if(spec.fields.begin(), spec.fields.end(),
                                   [](const FieldDescriptor& f) {
                                       return f.is_length() &&
                                              f.length_target == LengthTarget::Field;
                                   });
            it != spec.fields.end()) {
            for (const auto& f : spec.fields) {
                if (f.is_length() && f.length_target == LengthTarget::Field &&
                    !spec.find_field(f.length_field)) {
                    fail("length field '" + f.name + "' references unknown field " +
                         f.length_field);
                }
            }
        }
    }
};

}  // namespace

ProtocolSpec parse_spec_text(const std::string& text) {
    Parser p;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        ++p.line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto tokens = tokenize(line);
        if (tokens.empty()) continue;
        try {
            p.handle_line(tokens);
        } catch (const std::out_of_range&) {
            throw SpecParseError(p.line_no, "truncated declaration");
        }
    }
    if (p.current_variant) throw SpecParseError(p.line_no, "unterminated variant block");
    p.cross_check();
    return std::move(p.spec);
}

ProtocolSpec parse_spec_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SpecParseError(0, "cannot open spec file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_spec_text(buf.str());
}

}  // namespace icsfuzz::proto
