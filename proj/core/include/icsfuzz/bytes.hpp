#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace icsfuzz {

using Bytes = std::vector<uint8_t>;

std::string to_hex(const Bytes& data);
std::optional<Bytes> from_hex(std::string_view hex);

/// FNV-1a, used for stable content hashes (seed dedup, stream derivation).
uint64_t fnv1a(std::string_view s);
uint64_t fnv1a(const Bytes& data);

/// Lightweight typed-error result. T is the success payload, E the error type.
template <typename T, typename E>
class Result {
public:
    Result(T value) : v_(std::move(value)) {}
    Result(E error) : v_(std::move(error)) {}

    bool ok() const { return std::holds_alternative<T>(v_); }
    explicit operator bool() const { return ok(); }

    const T& value() const { return std::get<T>(v_); }
    T& value() { return std::get<T>(v_); }
    const E& error() const { return std::get<E>(v_); }

private:
    std::variant<T, E> v_;
};

}  // namespace icsfuzz
