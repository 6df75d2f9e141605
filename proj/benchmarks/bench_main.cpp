#include <benchmark/benchmark.h>

#include "icsfuzz/bytes.hpp"
#include "icsfuzz/protocol.hpp"

using namespace icsfuzz;

namespace {

proto::ProtocolSpec& modbus_spec() {
    static proto::ProtocolSpec spec =
        proto::parse_spec_file(std::string(ICSFUZZ_FIXTURE_DIR) + "/specs/modbus_tcp.spec");
    return spec;
}

void BM_DecodeFrame(benchmark::State& state) {
    auto& spec = modbus_spec();
    Bytes frame = *from_hex("00010000000601030000000a");
    for (auto _ : state) {
        auto result = proto::decode_frame(frame, spec);
        benchmark::DoNotOptimize(result);
    }
}
BENCHMARK(BM_DecodeFrame);

void BM_EncodeFrame(benchmark::State& state) {
    auto& spec = modbus_spec();
    auto decoded = proto::decode_frame(*from_hex("00010000000601030000000a"), spec);
    for (auto _ : state) {
        auto bytes = proto::encode_frame(decoded.value(), spec);
        benchmark::DoNotOptimize(bytes);
    }
}
BENCHMARK(BM_EncodeFrame);

void BM_ValidateFrame(benchmark::State& state) {
    auto& spec = modbus_spec();
    auto decoded = proto::decode_frame(*from_hex("00010000000601030000000a"), spec);
    for (auto _ : state) {
        auto report = proto::validate_frame(decoded.value(), spec);
        benchmark::DoNotOptimize(report);
    }
}
BENCHMARK(BM_ValidateFrame);

}  // namespace

BENCHMARK_MAIN();
