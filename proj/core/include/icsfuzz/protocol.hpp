#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "icsfuzz/bytes.hpp"

namespace icsfuzz::proto {

// ---------------------------------------------------------------------------
// Schema model
// ---------------------------------------------------------------------------

enum class DomainKind { EnumValues, IntegerRange, LengthOf, OpaqueBytes };

/// What a length-of field measures.
enum class LengthTarget {
    Rest,   // all bytes following this field
    Frame,  // the whole encoded frame
    Tail,   // the selected variant section (plus any trailing bytes)
    Field,  // the byte length of a named field
};

/// Named class of values; intervals are closed, over the value for integer
/// fields and over the byte length for opaque fields.
struct ValueClass {
    std::string name;
    std::vector<std::pair<uint64_t, uint64_t>> intervals;

    bool contains(uint64_t v) const;
};

struct FieldDescriptor {
    std::string name;
    uint32_t width_bits = 0;  // 0 for variable-length opaque fields
    DomainKind domain = DomainKind::IntegerRange;

    std::vector<uint64_t> enum_values;     // EnumValues
    uint64_t range_lo = 0, range_hi = 0;   // IntegerRange; length bounds for OpaqueBytes
    LengthTarget length_target = LengthTarget::Rest;
    std::string length_field;              // LengthOf with Field target
    int64_t length_adjust = 0;             // declared value = measured + adjust

    bool little_endian = false;
    bool mandatory = true;
    bool ephemeral = false;  // session-local (e.g. transaction ids); left out of seeds
    bool echo = false;       // echo-convention field, a semantic-mutation target

    std::vector<ValueClass> value_classes;

    bool is_bytes() const { return domain == DomainKind::OpaqueBytes; }
    bool is_length() const { return domain == DomainKind::LengthOf; }
    bool fixed_size_bytes() const { return is_bytes() && range_lo == range_hi; }
};

struct VariantLayout {
    std::string name;
    std::vector<uint64_t> when_values;      // discriminator values selecting this variant
    std::vector<std::string> field_names;   // layout order after the base section
};

enum class ConstraintOp { CeilDiv, Times };

/// Inter-field count relation, e.g. byte_count == ceil_div(length, 8).
/// The lhs field doubles as the relation-group key for semantic mutations.
struct CountConstraint {
    std::string name;
    std::string variant;
    std::string lhs;
    std::string rhs;
    ConstraintOp op = ConstraintOp::Times;
    uint64_t k = 1;
};

struct SplicePoint {
    std::string name;
    std::string after_field;  // empty when at_end
    bool at_end = false;
};

struct ProtocolSpec {
    std::string protocol_id;
    uint16_t default_port = 0;

    std::vector<FieldDescriptor> fields;  // every declared field, file order
    std::vector<std::string> base_order;  // base layout
    std::vector<VariantLayout> variants;
    std::string discriminator;  // base field the variants key on (empty if none)

    std::vector<CountConstraint> constraints;
    std::vector<SplicePoint> splices;
    std::map<std::string, double> priorities;  // fuzzing weight hints
    Bytes probe;                               // canonical benign request

    const FieldDescriptor* find_field(const std::string& name) const;
    const VariantLayout* variant_for(uint64_t discriminator_value) const;
    const VariantLayout* find_variant(const std::string& name) const;

    /// Base layout plus the given variant's fields, in wire order.
    std::vector<const FieldDescriptor*> layout(const VariantLayout* variant) const;
};

class SpecParseError : public std::runtime_error {
public:
    SpecParseError(int line, const std::string& msg)
        : std::runtime_error("spec parse error (line " + std::to_string(line) + "): " + msg),
          line_(line) {}
    int line() const { return line_; }

private:
    int line_ = 0;
};

ProtocolSpec parse_spec_text(const std::string& text);
ProtocolSpec parse_spec_file(const std::string& path);

// ---------------------------------------------------------------------------
// Frames
// ---------------------------------------------------------------------------

using FieldValue = std::variant<uint64_t, Bytes>;

/// Name of the pseudo-field holding bytes not covered by any layout. Decode
/// stores leftovers here so lenient parses still round-trip.
inline constexpr const char* kUnparsedField = "_unparsed";

struct Frame {
    std::string spec_id;
    std::map<std::string, FieldValue> values;
    std::set<std::string> pinned;  // length-of fields emitted verbatim, not recomputed
    std::optional<Bytes> raw;

    uint64_t int_value(const std::string& name) const;
    const Bytes& bytes_value(const std::string& name) const;
    bool has(const std::string& name) const { return values.count(name) > 0; }
};

bool same_values(const Frame& a, const Frame& b);

struct Violation {
    std::string field;
    std::string description;
    std::string group;  // relation group (the constrained field for count relations)
};

struct ValidationReport {
    bool valid = true;
    std::vector<Violation> violations;
};

struct DecodeError {
    enum class Kind { TooShort, UnknownLayout };
    Kind kind;
    std::string detail;
};

struct EncodeError {
    enum class Kind { MissingField, ValueOutOfWidth };
    Kind kind;
    std::string detail;
};

/// Populated by the fuzz-mode encoder instead of failing.
struct FuzzEncodeReport {
    std::vector<std::string> truncated_fields;
    std::vector<std::string> missing_fields;
    /// Byte extent of each emitted field, wire order. Splice points index here.
    std::vector<std::pair<std::string, std::pair<size_t, size_t>>> extents;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Structural parse: lenient about domains and length relations, strict about
/// framing (single-value enum base fields act as magic gates). Never throws.
Result<Frame, DecodeError> decode_frame(const Bytes& bytes, const ProtocolSpec& spec);

/// Strict encoder: every mandatory layout field must be present and fit its
/// width. Length-of fields are recomputed unless pinned.
Result<Bytes, EncodeError> encode_frame(const Frame& frame, const ProtocolSpec& spec);

/// Total encoder for mutated frames: oversized values are truncated to field
/// width, absent fields are skipped, both recorded in the report.
Bytes encode_frame_fuzz(const Frame& frame, const ProtocolSpec& spec,
                        FuzzEncodeReport* report = nullptr);

/// Domain and relation checks; reports everything, never throws.
ValidationReport validate_frame(const Frame& frame, const ProtocolSpec& spec);

/// All (field, value-class) pairs, declaration order, duplicate-free.
std::vector<std::pair<std::string, std::string>> enumerate_combos(const ProtocolSpec& spec);

/// Class containing the given value (length for opaque fields), if any.
std::optional<std::string> class_of(const FieldDescriptor& field, const FieldValue& value);

/// Representative value inside a named class (interval lower bound).
FieldValue representative_value(const FieldDescriptor& field, const std::string& class_name);

}  // namespace icsfuzz::proto
