#pragma once

// Test-side generator of frames drawn entirely from a spec's declared domains,
// with count relations honored. Kept independent of the mutation engine so it
// can serve as an oracle for round-trip, validity, and soak tests.

#include <string>

#include "icsfuzz/protocol.hpp"
#include "icsfuzz/rng.hpp"

namespace testsupport {

using icsfuzz::Bytes;
using icsfuzz::RngStream;
namespace proto = icsfuzz::proto;

inline uint64_t random_domain_value(const proto::FieldDescriptor& f, RngStream& rng,
                                    uint64_t cap_hi = ~0ULL) {
    if (f.domain == proto::DomainKind::EnumValues) {
        return f.enum_values[rng.below(f.enum_values.size())];
    }
    uint64_t hi = std::min(f.range_hi, cap_hi);
    return rng.between(f.range_lo, hi);
}

/// Build a random frame that satisfies every domain and count relation of the
/// selected variant. `sut_safe` keeps Modbus quantities inside what a
/// well-behaved server accepts without exception replies.
inline proto::Frame random_valid_frame(const proto::ProtocolSpec& spec, RngStream& rng,
                                       bool sut_safe = false) {
    proto::Frame frame;
    frame.spec_id = spec.protocol_id;

    const proto::VariantLayout& variant = spec.variants[rng.below(spec.variants.size())];
    uint64_t disc = variant.when_values[rng.below(variant.when_values.size())];

    for (const auto* f : spec.layout(&variant)) {
        if (f->is_length()) continue;  // recomputed by the encoder
        if (f->name == spec.discriminator) {
            frame.values[f->name] = disc;
            continue;
        }
        if (f->is_bytes()) continue;  // sized after counts are known
        uint64_t cap = ~0ULL;
        if (sut_safe && spec.protocol_id == "modbus_tcp") {
            if (f->name == "length") {
                switch (disc) {
                    case 1: case 2: cap = 512; break;
                    case 3: case 4: cap = 100; break;
                    case 15: cap = 512; break;
                    default: cap = 100; break;
                }
            }
            if (f->name == "start_address") cap = 30000;
            if (f->name == "unit") cap = 247;
        }
        frame.values[f->name] = random_domain_value(*f, rng, cap);
    }

    // Size opaque fields: honor a governing count constraint when one exists
    // (clamping the count so the data length stays in-domain), otherwise draw
    // a length from the field's own domain.
    for (const auto* f : spec.layout(&variant)) {
        if (!f->is_bytes()) continue;
        uint64_t len = rng.between(f->range_lo, std::min<uint64_t>(f->range_hi, 64));
        for (const auto& c : spec.constraints) {
            if (c.variant != variant.name) continue;
            const auto* lhs = spec.find_field(c.lhs);
            if (!lhs || !lhs->is_length() || lhs->length_field != f->name) continue;
            auto len_of = [&](uint64_t n) {
                return c.op == proto::ConstraintOp::CeilDiv ? (n + c.k - 1) / c.k : n * c.k;
            };
            const auto* rhs_field = spec.find_field(c.rhs);
            uint64_t count_cap = c.op == proto::ConstraintOp::CeilDiv ? f->range_hi * c.k
                                                                      : f->range_hi / c.k;
            uint64_t count = std::min(frame.int_value(c.rhs),
                                      std::min(rhs_field->range_hi, count_cap));
            count = std::max(count, rhs_field->range_lo);
            frame.values[c.rhs] = count;
            len = len_of(count);
        }
        Bytes data(len);
        for (auto& b : data) b = static_cast<uint8_t>(rng.below(256));
        frame.values[f->name] = std::move(data);
    }
    return frame;
}

}  // namespace testsupport
