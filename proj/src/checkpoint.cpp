// SPDX-License-Identifier: Apache-2.0
#include "cmer/checkpoint.h"

#include <fstream>
#include <sstream>

#include "cmer/binary_io.h"
#include "cmer/errors.h"

namespace cmer {

namespace {

constexpr char kMagic[4] = {'C', 'M', 'C', 'K'};
constexpr std::uint32_t kMaxRank = 16;

void write(std::ostream& os, const Checkpoint& ck) {
    os.write(kMagic, 4);
    io::put_u32(os, kCheckpointVersion);
    io::put_u64(os, ck.step);
    io::put_string(os, ck.meta_json);
    io::put_string(os, ck.rng_state);
    io::put_u32(os, static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        io::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) io::put_u64(os, d);
        for (double v : t.data()) io::put_f64(os, v);
    }
}

}  // namespace

std::string checkpoint_bytes(const Checkpoint& ck) {
    std::ostringstream os(std::ios::binary);
    write(os, ck);
    return os.str();
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        write(os, ck);
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
        throw IoError(path.string() + " is not a CMCK checkpoint");
    }
    const std::uint32_t version = io::get_u32(is);
    if (version != kCheckpointVersion) {
        throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.step = io::get_u64(is);
    ck.meta_json = io::get_string(is);
    ck.rng_state = io::get_string(is);
    const std::uint32_t count = io::get_u32(is);
    std::string previous;
    for (std::uint32_t r = 0; r < count; ++r) {
        const std::uint32_t name_len = io::get_u32(is);
        std::string name(name_len, '\0');
        if (name_len == 0 || !is.read(name.data(), name_len)) throw IoError(path.string() + ": bad record name");
        if (r > 0 && name <= previous) throw IoError(path.string() + ": records are not in ascending name order");
        const std::uint32_t rank = io::get_u32(is);
        if (rank > kMaxRank) throw IoError(path.string() + ": record " + name + " has rank " + std::to_string(rank));
        Shape shape(rank);
        std::uint64_t n = 1;
        for (auto& d : shape) {
            d = io::get_u64(is);
            if (d == 0 || d > (1ull << 32)) throw IoError(path.string() + ": record " + name + " has a bad dimension");
            n *= d;
            if (n > (1ull << 32)) throw IoError(path.string() + ": record " + name + " is too large");
        }
        std::vector<double> data(n);
        for (auto& v : data) v = io::get_f64(is);
        ck.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
        previous = std::move(name);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes");
    return ck;
}

}  // namespace cmer
