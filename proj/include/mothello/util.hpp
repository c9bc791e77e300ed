#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mothello {

// FNV-1a 64-bit. Used for family/corpus content hashes recorded in manifests.
class Fnv1a {
public:
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    void update_u64(uint64_t v) { update(&v, sizeof v); }
    uint64_t value() const { return hash_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_));
        return std::string(buf);
    }

private:
    uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string hash_bytes(const std::string& bytes) {
    Fnv1a h;
    h.update(bytes);
    return h.hex();
}

inline std::string hash_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file for hashing: " + path.string());
    Fnv1a h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(buf, static_cast<size_t>(in.gcount()));
    }
    return h.hex();
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + path.string());
    out << text;
}

// Deterministic parallel-for: the range is split into `jobs` contiguous
// chunks, each chunk runs on its own thread, and any reduction the caller
// does afterwards happens in chunk order. Results are therefore independent
// of scheduling (though not of `jobs` itself, which runs get recorded in
// manifests).
inline void parallel_chunks(int64_t n, int jobs,
                            const std::function<void(int chunk, int64_t begin, int64_t end)>& fn) {
    if (jobs < 1) jobs = 1;
    if (n <= 0) return;
    if (jobs == 1 || n == 1) {
        fn(0, 0, n);
        return;
    }
    const int64_t per = (n + jobs - 1) / jobs;
    std::vector<std::thread> workers;
    int chunk = 0;
    for (int64_t begin = 0; begin < n; begin += per, ++chunk) {
        const int64_t end = std::min(n, begin + per);
        workers.emplace_back(fn, chunk, begin, end);
    }
    for (auto& w : workers) w.join();
}

inline int default_jobs() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace mothello
