// Binary checkpoint container: magic, version tag, then typed records.
// Doubles are stored as raw IEEE-754 bytes so arrays round-trip bit-exactly.

#pragma once

#include "bdcp/autograd.hpp"

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace bdcp {

inline constexpr char kCheckpointMagic[8] = {'B', 'D', 'C', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointWriter {
public:
    /// Writes the magic and version header followed by `kind`.
    CheckpointWriter(std::ostream& out, const std::string& kind);

    void u64(std::uint64_t v);
    void i64(std::int64_t v);
    void f64(double v);
    void str(const std::string& s);
    void strings(const std::vector<std::string>& v);
    void matrix(const std::string& name, const Matrix& m);

private:
    std::ostream& out_;
};

class CheckpointReader {
public:
    /// Validates magic, version and that the stored kind equals `kind`.
    CheckpointReader(std::istream& in, const std::string& kind);

    std::uint64_t u64();
    std::int64_t i64();
    double f64();
    std::string str();
    std::vector<std::string> strings();
    /// Reads a named array; throws when the name or shape differ from `expected`.
    void matrix(const std::string& name, Matrix& expected);

private:
    void raw(void* dst, size_t n);
    std::istream& in_;
};

} // namespace bdcp
