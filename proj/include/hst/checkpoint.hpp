#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   offset  size  field
//   0       8     magic "HSTCKPT\0"
//   8       4     format version (u32)
//   12      8     payload size in bytes (u64)
//   20      4     CRC-32 of the payload (u32, zlib polynomial)
//   24      ...   payload
//
// Payload:
//   string  header JSON {"model": HstConfig, "train": TrainConfig, "flags": {...}}
//   u64     optimizer step counter
//   u32     tensor count, then per tensor (sorted by name):
//             string name, u64 rows, u64 cols, rows*cols f64 row-major
//   u32     metric line count, then per line: string (one JSON object)
//
// A string is a u64 byte length followed by UTF-8 bytes.

#include "hst/config.hpp"
#include "hst/errors.hpp"
#include "hst/model.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace hst {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'H', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};

struct HstCheckpoint {
    std::uint32_t format_version = kCheckpointVersion;
    HstConfig model;
    TrainConfig train;
    std::map<std::string, Mat> tensors;
    std::uint64_t step = 0;
    bool codebooks_initialized = false;
    bool classifier_trained = false;
    std::vector<std::string> metrics;
};

inline std::string counts_name(const Codebook& cb) { return "quant." + to_string(cb.role) + ".counts"; }

inline HstCheckpoint capture(const HstModel& model, const TrainConfig& train, std::uint64_t step,
                             std::vector<std::string> metrics = {}, bool classifier_trained = false) {
    HstCheckpoint ck;
    ck.model = model.config();
    ck.train = train;
    ck.step = step;
    ck.codebooks_initialized = model.codebooks_initialized();
    ck.classifier_trained = classifier_trained;
    ck.metrics = std::move(metrics);
    for (const auto& [name, v] : model.params().all()) ck.tensors[name] = v.value();
    for (const auto* cb : model.quantizer().books()) ck.tensors[counts_name(*cb)] = Mat(cb->counts);
    return ck;
}

// Copies checkpoint tensors into a model built from the same configuration.
inline void restore(HstModel& model, const HstCheckpoint& ck) {
    for (const auto& [name, v] : model.params().all()) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end()) throw ValidationError("checkpoint is missing tensor " + name);
        if (it->second.rows() != v.rows() || it->second.cols() != v.cols())
            throw ValidationError("checkpoint tensor " + name + " has the wrong shape");
        Var p = v;
        p.mutable_value() = it->second;
    }
    for (auto* cb : model.quantizer().books()) {
        auto it = ck.tensors.find(counts_name(*cb));
        if (it == ck.tensors.end()) throw ValidationError("checkpoint is missing " + counts_name(*cb));
        if (it->second.size() != cb->size()) throw ValidationError(counts_name(*cb) + " has the wrong size");
        cb->counts = Eigen::Map<const Vec>(it->second.data(), cb->size());
    }
    model.set_codebooks_initialized(ck.codebooks_initialized);
}

inline std::unique_ptr<HstModel> make_model(const HstCheckpoint& ck) {
    auto m = std::make_unique<HstModel>(ck.model, 0);
    restore(*m, ck);
    return m;
}

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void pod(T v) {
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void str(const std::string& s) {
        pod<std::uint64_t>(s.size());
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void doubles(const double* d, std::size_t n) {
        const auto* p = reinterpret_cast<const char*>(d);
        buf_.insert(buf_.end(), p, p + n * sizeof(double));
    }
    const std::vector<char>& bytes() const { return buf_; }

private:
    std::vector<char> buf_;
};

class ByteReader {
public:
    ByteReader(const char* data, std::size_t size) : data_(data), size_(size) {}

    template <typename T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint64_t>();
        need(n);
        std::string s(data_ + pos_, n);
        pos_ += n;
        return s;
    }
    void doubles(double* out, std::size_t n) {
        need(n * sizeof(double));
        std::memcpy(out, data_ + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
    }
    bool done() const { return pos_ == size_; }

private:
    void need(std::size_t n) const {
        if (n > size_ - pos_) throw ChecksumError("checkpoint payload ends early");
    }
    const char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::vector<char>& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace detail

inline std::vector<char> serialize(const HstCheckpoint& ck) {
    detail::ByteWriter payload;
    nlohmann::json header{{"model", to_json(ck.model)},
                          {"train", to_json(ck.train)},
                          {"flags",
                           {{"codebooks_initialized", ck.codebooks_initialized},
                            {"classifier_trained", ck.classifier_trained}}}};
    payload.str(header.dump());
    payload.pod<std::uint64_t>(ck.step);
    payload.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, m] : ck.tensors) {
        payload.str(name);
        payload.pod<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
        payload.pod<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
        payload.doubles(m.data(), static_cast<std::size_t>(m.size()));
    }
    payload.pod<std::uint32_t>(static_cast<std::uint32_t>(ck.metrics.size()));
    for (const auto& line : ck.metrics) payload.str(line);

    detail::ByteWriter file;
    for (char c : kCheckpointMagic) file.pod<char>(c);
    file.pod<std::uint32_t>(ck.format_version);
    file.pod<std::uint64_t>(payload.bytes().size());
    file.pod<std::uint32_t>(detail::crc32_of(payload.bytes()));
    std::vector<char> out = file.bytes();
    out.insert(out.end(), payload.bytes().begin(), payload.bytes().end());
    return out;
}

inline HstCheckpoint deserialize(const std::vector<char>& bytes) {
    constexpr std::size_t header_size = 8 + 4 + 8 + 4;
    if (bytes.size() < header_size) throw ChecksumError("checkpoint truncated: header incomplete");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw ChecksumError("not a checkpoint file (bad magic)");
    detail::ByteReader head(bytes.data() + 8, header_size - 8);
    const auto version = head.pod<std::uint32_t>();
    const auto size = head.pod<std::uint64_t>();
    const auto crc = head.pod<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + "); re-export it with a matching build");
    if (bytes.size() - header_size != size)
        throw ChecksumError("checkpoint size mismatch: header declares " + std::to_string(size) + " payload bytes, file has " +
                            std::to_string(bytes.size() - header_size));
    std::vector<char> payload(bytes.begin() + header_size, bytes.end());
    if (detail::crc32_of(payload) != crc) throw ChecksumError("checkpoint checksum mismatch");

    detail::ByteReader r(payload.data(), payload.size());
    HstCheckpoint ck;
    ck.format_version = version;
    const auto header = nlohmann::json::parse(r.str());
    ck.model = hst_config_from_json(header.at("model"));
    ck.train = train_config_from_json(header.at("train"));
    ck.codebooks_initialized = header.at("flags").at("codebooks_initialized").get<bool>();
    ck.classifier_trained = header.at("flags").at("classifier_trained").get<bool>();
    ck.step = r.pod<std::uint64_t>();
    const auto n_tensors = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = r.str();
        const auto rows = r.pod<std::uint64_t>();
        const auto cols = r.pod<std::uint64_t>();
        Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        r.doubles(m.data(), static_cast<std::size_t>(rows * cols));
        ck.tensors.emplace(std::move(name), std::move(m));
    }
    const auto n_metrics = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_metrics; ++i) ck.metrics.push_back(r.str());
    if (!r.done()) throw ChecksumError("checkpoint has trailing bytes");
    return ck;
}

inline void save_checkpoint(const HstCheckpoint& ck, const std::filesystem::path& path) {
    const auto bytes = serialize(ck);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError("cannot write checkpoint " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw LoadError("failed writing checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline HstCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open checkpoint " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace hst
