#pragma once

#include <fstream>
#include <sstream>
#include <string>

namespace testsupport {

inline std::string fixture_path(const std::string& rel) {
    return std::string(ICSFUZZ_FIXTURE_DIR) + "/" + rel;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace testsupport
