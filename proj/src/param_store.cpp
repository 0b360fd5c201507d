#include "pcd/param_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace pcd {

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& path, Tensor<T> value) {
    auto [it, inserted] = params_.emplace(path, std::move(value));
    if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter path '" + path + "'");
    return it->second;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + path + "'");
    return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + path + "'");
    return it->second;
}

template <typename T>
std::size_t ParamStore<T>::numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

namespace {

constexpr char kMagic[5] = {'P', 'C', 'D', 'K', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;
    std::string file;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DataError("truncated checkpoint: " + file);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

struct RawParam {
    std::string path;
    Shape shape;
    std::vector<float> data;
};

std::vector<RawParam> decode(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + file.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r{buf, 0, file.string()};
    if (r.str(5) != std::string(kMagic, 5)) throw DataError("bad checkpoint magic: " + file.string());
    const auto count = r.u32();
    std::vector<RawParam> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        RawParam p;
        p.path = r.str(r.u32());
        const auto rank = r.u32();
        if (rank > 8) throw DataError("implausible tensor rank in checkpoint: " + file.string());
        for (std::uint32_t d = 0; d < rank; ++d) p.shape.push_back(r.u32());
        const auto n = shape_numel(p.shape);
        r.need(4 * n);
        p.data.resize(n);
        for (std::size_t k = 0; k < n; ++k) p.data[k] = r.f32();
        out.push_back(std::move(p));
    }
    if (r.pos != buf.size()) throw DataError("trailing bytes in checkpoint: " + file.string());
    return out;
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<T>& store) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 5);
    put_u32(out, std::uint32_t(store.size()));
    for (const auto& [path, t] : store) {
        put_u32(out, std::uint32_t(path.size()));
        out.insert(out.end(), path.begin(), path.end());
        put_u32(out, std::uint32_t(t.rank()));
        for (auto d : t.shape()) put_u32(out, std::uint32_t(d));
        for (const T v : t.data()) put_f32(out, float(v));
    }
    return out;
}

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& file) {
    const auto bytes = encode_checkpoint(store);
    const auto tmp = std::filesystem::path(file.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint: " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        if (!out) throw DataError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, file);
}

template <typename T>
void load_checkpoint_into(ParamStore<T>& store, const std::filesystem::path& file) {
    const auto raw = decode(file);
    if (raw.size() != store.size()) {
        throw DataError("checkpoint " + file.string() + " has " + std::to_string(raw.size()) +
                        " parameters, model expects " + std::to_string(store.size()));
    }
    for (const auto& p : raw) {
        if (!store.contains(p.path)) throw DataError("checkpoint parameter not in model: " + p.path);
        auto& t = store.get(p.path);
        if (t.shape() != p.shape) {
            throw DataError("shape mismatch for " + p.path + ": checkpoint " + shape_str(p.shape) + ", model " +
                            shape_str(t.shape()));
        }
        auto dst = t.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(p.data[i]);
    }
}

ParamStore<float> read_checkpoint(const std::filesystem::path& file) {
    ParamStore<float> store;
    for (auto& p : decode(file)) store.add(p.path, Tensor<float>::from(p.shape, std::move(p.data), true));
    return store;
}

template class ParamStore<float>;
template class ParamStore<double>;
template void save_checkpoint<float>(const ParamStore<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const ParamStore<double>&, const std::filesystem::path&);
template std::vector<std::uint8_t> encode_checkpoint<float>(const ParamStore<float>&);
template std::vector<std::uint8_t> encode_checkpoint<double>(const ParamStore<double>&);
template void load_checkpoint_into<float>(ParamStore<float>&, const std::filesystem::path&);
template void load_checkpoint_into<double>(ParamStore<double>&, const std::filesystem::path&);

}  // namespace pcd
