#include "bdcp/checkpoint.hpp"

#include "bdcp/error.hpp"

#include <algorithm>
#include <cstring>

namespace bdcp {

CheckpointWriter::CheckpointWriter(std::ostream& out, const std::string& kind) : out_(out) {
    out_.write(kCheckpointMagic, sizeof kCheckpointMagic);
    u64(kCheckpointVersion);
    str(kind);
}

void CheckpointWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void CheckpointWriter::i64(std::int64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
void CheckpointWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void CheckpointWriter::str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void CheckpointWriter::strings(const std::vector<std::string>& v) {
    u64(v.size());
    for (const auto& s : v) str(s);
}

void CheckpointWriter::matrix(const std::string& name, const Matrix& m) {
    str(name);
    i64(m.rows());
    i64(m.cols());
    out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

CheckpointReader::CheckpointReader(std::istream& in, const std::string& kind) : in_(in) {
    char magic[sizeof kCheckpointMagic];
    raw(magic, sizeof magic);
    if (!std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic)))
        throw Error("not a checkpoint file");
    const auto version = u64();
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    const auto stored = str();
    if (stored != kind) throw Error("checkpoint holds '" + stored + "', expected '" + kind + "'");
}

void CheckpointReader::raw(void* dst, size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) throw Error("truncated checkpoint");
}

std::uint64_t CheckpointReader::u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
}

std::int64_t CheckpointReader::i64() {
    std::int64_t v;
    raw(&v, sizeof v);
    return v;
}

double CheckpointReader::f64() {
    double v;
    raw(&v, sizeof v);
    return v;
}

std::string CheckpointReader::str() {
    const auto n = u64();
    if (n > (1ULL << 32)) throw Error("corrupt checkpoint string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
}

std::vector<std::string> CheckpointReader::strings() {
    const auto n = u64();
    if (n > (1ULL << 32)) throw Error("corrupt checkpoint list length");
    std::vector<std::string> v;
    v.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(str());
    return v;
}

void CheckpointReader::matrix(const std::string& name, Matrix& expected) {
    const auto stored = str();
    if (stored != name) throw Error("checkpoint array '" + stored + "' where '" + name + "' expected");
    const auto rows = i64();
    const auto cols = i64();
    if (rows != expected.rows() || cols != expected.cols())
        throw Error("checkpoint array '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols));
    raw(expected.data(), static_cast<size_t>(expected.size()) * sizeof(double));
}

} // namespace bdcp
