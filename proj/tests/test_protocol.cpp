#include <algorithm>
#include <set>
#include <sstream>

#include "doctest.h"
#include "icsfuzz/protocol.hpp"
#include "icsfuzz/rng.hpp"
#include "support/fixtures.hpp"
#include "support/frame_gen.hpp"

using namespace icsfuzz;
using namespace icsfuzz::proto;
using testsupport::fixture_path;

namespace {

ProtocolSpec load_modbus() { return parse_spec_file(fixture_path("specs/modbus_tcp.spec")); }

Bytes hex(const std::string& s) { return *from_hex(s); }

// Counts fields and combos straight off the fixture text, independently of the
// parser: one field per "field"/"shared" line, one combo per name=... token
// after "classes" (or one when the clause is absent).
std::pair<int, int> count_fields_and_combos_textually(const std::string& path) {
    std::istringstream in(testsupport::read_file(path));
    std::string line;
    int fields = 0, combos = 0;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string kw;
        ls >> kw;
        if (kw != "field" && kw != "shared") continue;
        ++fields;
        int classes = 0;
        bool in_classes = false;
        std::string tok;
        while (ls >> tok) {
            if (tok == "classes") {
                in_classes = true;
                continue;
            }
            if (in_classes && tok.find('=') != std::string::npos) ++classes;
        }
        combos += classes > 0 ? classes : 1;
    }
    return {fields, combos};
}

}  // namespace

TEST_CASE("decode: reference FC-03 request") {
    auto spec = load_modbus();
    // Values cross-checked against an independent struct-unpacking decoder
    // (scripts/modbus_ref_decode.py) before being frozen here.
    auto result = decode_frame(hex("00010000000601030000000a"), spec);
    REQUIRE(result.ok());
    const Frame& f = result.value();
    CHECK(f.spec_id == "modbus_tcp");
    CHECK(f.int_value("transaction") == 1);
    CHECK(f.int_value("protocol") == 0);
    CHECK(f.int_value("mbap_length") == 6);
    CHECK(f.int_value("unit") == 1);
    CHECK(f.int_value("function_code") == 3);
    CHECK(f.int_value("start_address") == 0);
    CHECK(f.int_value("length") == 10);
    CHECK(f.raw == hex("00010000000601030000000a"));
    CHECK(f.pinned.empty());
    // every mandatory field of the selected layout is populated
    for (const auto* fd : spec.layout(spec.variant_for(3))) {
        CHECK(f.has(fd->name));
    }
}

TEST_CASE("decode: empty input is TooShort") {
    auto spec = load_modbus();
    auto result = decode_frame({}, spec);
    REQUIRE_FALSE(result.ok());
    CHECK(result.error().kind == DecodeError::Kind::TooShort);
}

TEST_CASE("decode: truncated frame is TooShort") {
    auto spec = load_modbus();
    auto result = decode_frame(hex("000100000006"), spec);
    REQUIRE_FALSE(result.ok());
    CHECK(result.error().kind == DecodeError::Kind::TooShort);
}

TEST_CASE("decode: bad magic is UnknownLayout") {
    auto spec = load_modbus();
    // protocol id bytes != 0 -> not a parseable frame of this spec
    auto result = decode_frame(hex("00019900000601030000000a"), spec);
    REQUIRE_FALSE(result.ok());
    CHECK(result.error().kind == DecodeError::Kind::UnknownLayout);
}

TEST_CASE("decode is lenient, validate is strict: altered MBAP length") {
    auto spec = load_modbus();
    auto result = decode_frame(hex("00010000000901030000000a"), spec);
    REQUIRE(result.ok());
    const Frame& f = result.value();
    CHECK(f.int_value("mbap_length") == 9);
    CHECK(f.pinned.count("mbap_length") == 1);  // preserved verbatim on re-encode

    auto report = validate_frame(f, spec);
    CHECK_FALSE(report.valid);
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].field == "mbap_length");
    CHECK(report.violations[0].description.find("mismatch") != std::string::npos);

    // lenient decode still round-trips the anomalous bytes exactly
    auto back = encode_frame(f, spec);
    REQUIRE(back.ok());
    CHECK(back.value() == *f.raw);
}

TEST_CASE("encode: round-trips the reference frame") {
    auto spec = load_modbus();
    auto decoded = decode_frame(hex("00010000000601030000000a"), spec);
    REQUIRE(decoded.ok());
    auto bytes = encode_frame(decoded.value(), spec);
    REQUIRE(bytes.ok());
    CHECK(bytes.value() == hex("00010000000601030000000a"));
}

TEST_CASE("encode: missing mandatory field in strict mode") {
    auto spec = load_modbus();
    Frame f;
    f.spec_id = "modbus_tcp";
    f.values["transaction"] = uint64_t{1};
    f.values["protocol"] = uint64_t{0};
    f.values["unit"] = uint64_t{1};
    // no function_code
    auto result = encode_frame(f, spec);
    REQUIRE_FALSE(result.ok());
    CHECK(result.error().kind == EncodeError::Kind::MissingField);
    CHECK(result.error().detail.find("function_code") != std::string::npos);
}

TEST_CASE("encode: pinned length survives encoding") {
    auto spec = load_modbus();
    auto decoded = decode_frame(hex("00010000000601030000000a"), spec);
    REQUIRE(decoded.ok());
    Frame f = decoded.value();
    f.values["mbap_length"] = uint64_t{9};
    f.pinned.insert("mbap_length");
    auto bytes = encode_frame(f, spec);
    REQUIRE(bytes.ok());
    CHECK(bytes.value() == hex("00010000000901030000000a"));
}

TEST_CASE("encode: fuzz mode truncates to width and records it") {
    auto spec = load_modbus();
    auto decoded = decode_frame(hex("00010000000601030000000a"), spec);
    REQUIRE(decoded.ok());
    Frame f = decoded.value();
    f.values["function_code"] = uint64_t{0x103};  // 8-bit field
    FuzzEncodeReport report;
    Bytes bytes = encode_frame_fuzz(f, spec, &report);
    CHECK(bytes[7] == 0x03);
    REQUIRE(report.truncated_fields.size() == 1);
    CHECK(report.truncated_fields[0] == "function_code");

    // strict mode refuses the same frame
    auto strict = encode_frame(f, spec);
    REQUIRE_FALSE(strict.ok());
    CHECK(strict.error().kind == EncodeError::Kind::ValueOutOfWidth);
}

TEST_CASE("validate: well-formed request is valid") {
    auto spec = load_modbus();
    auto decoded = decode_frame(hex("00010000000601030000000a"), spec);
    REQUIRE(decoded.ok());
    auto report = validate_frame(decoded.value(), spec);
    CHECK(report.valid);
    CHECK(report.violations.empty());
}

TEST_CASE("validate: undefined function code") {
    auto spec = load_modbus();
    auto decoded = decode_frame(hex("000100000006015c0000000a"), spec);
    REQUIRE(decoded.ok());  // decodes: unknown selector falls back to unparsed tail
    auto report = validate_frame(decoded.value(), spec);
    CHECK_FALSE(report.valid);
    bool flagged = std::any_of(report.violations.begin(), report.violations.end(),
                               [](const Violation& v) {
                                   return v.field == "function_code" &&
                                          v.description == "not in enumerated domain";
                               });
    CHECK(flagged);
}

TEST_CASE("validate: violations are deterministically ordered") {
    auto spec = load_modbus();
    // break both mbap_length and the function code at once
    auto decoded = decode_frame(hex("000100000009015c0000000a"), spec);
    REQUIRE(decoded.ok());
    auto first = validate_frame(decoded.value(), spec);
    auto second = validate_frame(decoded.value(), spec);
    REQUIRE(first.violations.size() == second.violations.size());
    for (size_t i = 0; i < first.violations.size(); ++i) {
        CHECK(first.violations[i].field == second.violations[i].field);
    }
    // layout order: mbap_length precedes function_code
    CHECK(first.violations[0].field == "mbap_length");
}

TEST_CASE("enumerate_combos: synthetic spec counting") {
    auto spec = parse_spec_text(R"(
protocol toy
port 9999
field kind u8 enum 1,2 classes a=1 b=2
field level u8 range 0..9 classes low=0..3 mid=4..6 high=7..9
)");
    auto combos = enumerate_combos(spec);
    CHECK(combos.size() == 5);
    std::set<std::pair<std::string, std::string>> unique(combos.begin(), combos.end());
    CHECK(unique.size() == combos.size());
}

TEST_CASE("enumerate_combos: opaque field with a single class") {
    auto spec = parse_spec_text(R"(
protocol blob
port 1
field body u8 range 0..255
)");
    CHECK(enumerate_combos(spec).size() == 1);
}

TEST_CASE("enumerate_combos: bundled spec matches independent textual count") {
    auto spec = load_modbus();
    auto [fields, combos] = count_fields_and_combos_textually(fixture_path("specs/modbus_tcp.spec"));
    CHECK(spec.fields.size() == static_cast<size_t>(fields));
    CHECK(enumerate_combos(spec).size() == static_cast<size_t>(combos));
    CHECK(fields == 11);
    CHECK(combos == 30);
}

TEST_CASE("enumerate_combos is pure and order-stable") {
    auto spec = load_modbus();
    auto a = enumerate_combos(spec);
    auto b = enumerate_combos(spec);
    CHECK(a == b);
}

TEST_CASE("property: round-trip over randomized valid frames") {
    for (const char* name : {"specs/modbus_tcp.spec", "specs/s7comm_min.spec",
                             "specs/enip_min.spec"}) {
        auto spec = parse_spec_file(fixture_path(name));
        RngStream rng(20240001);
        for (int i = 0; i < 200; ++i) {
            Frame f = testsupport::random_valid_frame(spec, rng);
            auto bytes = encode_frame(f, spec);
            REQUIRE_MESSAGE(bytes.ok(), name << ": " << (bytes.ok() ? "" : bytes.error().detail));
            auto back = decode_frame(bytes.value(), spec);
            REQUIRE(back.ok());
            // decoded values must cover the originals exactly (plus derived lengths)
            for (const auto& [k, v] : f.values) {
                REQUIRE_MESSAGE(back.value().values.at(k) == v, name << " field " << k);
            }
            auto again = encode_frame(back.value(), spec);
            REQUIRE(again.ok());
            CHECK(again.value() == bytes.value());
        }
    }
}

TEST_CASE("property: validation soundness for domain-generated frames") {
    for (const char* name : {"specs/modbus_tcp.spec", "specs/s7comm_min.spec",
                             "specs/enip_min.spec"}) {
        auto spec = parse_spec_file(fixture_path(name));
        RngStream rng(20240002);
        for (int i = 0; i < 200; ++i) {
            Frame f = testsupport::random_valid_frame(spec, rng);
            auto bytes = encode_frame(f, spec);
            REQUIRE(bytes.ok());
            auto decoded = decode_frame(bytes.value(), spec);
            REQUIRE(decoded.ok());
            auto report = validate_frame(decoded.value(), spec);
            if (!report.valid) {
                CAPTURE(name);
                CAPTURE(report.violations[0].field);
                CAPTURE(report.violations[0].description);
            }
            REQUIRE(report.valid);
        }
    }
}

TEST_CASE("property: decode totality on arbitrary bytes") {
    auto spec = load_modbus();
    RngStream rng(20240003);
    for (int i = 0; i < 500; ++i) {
        Bytes junk(rng.below(40));
        for (auto& b : junk) b = static_cast<uint8_t>(rng.below(256));
        auto result = decode_frame(junk, spec);  // must not throw or crash
        if (result.ok()) {
            auto report = validate_frame(result.value(), spec);
            (void)report;
        }
    }
    CHECK(true);
}

TEST_CASE("bit-granular fields pack and round-trip") {
    auto spec = parse_spec_text(R"(
protocol nibbles
port 7
field version u4 enum 2 classes v2=2
field flags u4 range 0..15 classes low=0..7 high=8..15
field body u16 range 0..65535
)");
    Frame f;
    f.spec_id = "nibbles";
    f.values["version"] = uint64_t{2};
    f.values["flags"] = uint64_t{0xA};
    f.values["body"] = uint64_t{0x1234};
    auto bytes = encode_frame(f, spec);
    REQUIRE(bytes.ok());
    CHECK(bytes.value() == hex("2a1234"));
    auto back = decode_frame(bytes.value(), spec);
    REQUIRE(back.ok());
    CHECK(back.value().int_value("flags") == 0xA);
}

TEST_CASE("little-endian fields: register session probe decodes") {
    auto spec = parse_spec_file(fixture_path("specs/enip_min.spec"));
    auto result = decode_frame(spec.probe, spec);
    REQUIRE(result.ok());
    const Frame& f = result.value();
    CHECK(f.int_value("enc_command") == 0x65);
    CHECK(f.int_value("enc_length") == 4);
    CHECK(f.int_value("proto_version") == 1);
    CHECK(validate_frame(f, spec).valid);
}

TEST_CASE("s7 probe decodes with governed variable sections") {
    auto spec = parse_spec_file(fixture_path("specs/s7comm_min.spec"));
    auto result = decode_frame(spec.probe, spec);
    REQUIRE(result.ok());
    const Frame& f = result.value();
    CHECK(f.int_value("tpkt_length") == 25);
    CHECK(f.int_value("s7_function") == 240);
    CHECK(f.int_value("s7_param_length") == 8);
    CHECK(f.bytes_value("s7_parameters").size() == 7);
    CHECK(f.bytes_value("s7_payload").empty());
    CHECK(validate_frame(f, spec).valid);
}

TEST_CASE("spec parser rejects malformed schemas") {
    CHECK_THROWS_AS(parse_spec_text("field x u8 range 0..3\n"), SpecParseError);  // no protocol
    CHECK_THROWS_AS(parse_spec_text("protocol p\nfield x u8 range 9..3\n"), SpecParseError);
    CHECK_THROWS_AS(parse_spec_text("protocol p\nfield x u8 range 0..3\nfield x u8 range 0..1\n"),
                    SpecParseError);
    CHECK_THROWS_AS(parse_spec_text("protocol p\nfield x u0 range 0..3\n"), SpecParseError);
    CHECK_THROWS_AS(
        parse_spec_text("protocol p\nfield x u8 range 0..9 classes a=0..3 b=2..9\n"),
        SpecParseError);  // overlapping classes
    CHECK_THROWS_AS(parse_spec_text("protocol p\nfield x u8 range 0..9 classes a=0..3\n"),
                    SpecParseError);  // not exhaustive
    CHECK_THROWS_AS(parse_spec_text("protocol p\nshared s u8 range 0..1\n"), SpecParseError);
}

TEST_CASE("bundled specs parse clean") {
    for (const char* name : {"specs/modbus_tcp.spec", "specs/s7comm_min.spec",
                             "specs/enip_min.spec"}) {
        auto spec = parse_spec_file(fixture_path(name));
        CHECK_FALSE(spec.protocol_id.empty());
        CHECK(spec.default_port != 0);
        CHECK_FALSE(spec.probe.empty());
        // probes are themselves valid frames of their spec
        auto probe = decode_frame(spec.probe, spec);
        REQUIRE(probe.ok());
        CHECK(validate_frame(probe.value(), spec).valid);
    }
}
