#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcd/tensor.hpp"

namespace pcd {

/// Named learnable tensors. Paths are unique; iteration is in lexicographic
/// path order, which is also the on-disk order.
template <typename T>
class ParamStore {
public:
    explicit ParamStore(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}

    Tensor<T>& add(const std::string& path, Tensor<T> value);
    const Tensor<T>& get(const std::string& path) const;
    Tensor<T>& get(const std::string& path);
    bool contains(const std::string& path) const { return params_.count(path) != 0; }

    std::size_t size() const { return params_.size(); }
    std::size_t numel() const;
    std::uint64_t rng_seed() const { return rng_seed_; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();

    /// Deep copy into another scalar type; leaves require grad.
    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out(rng_seed_);
        for (const auto& [path, t] : params_) {
            std::vector<U> data(t.data().begin(), t.data().end());
            out.add(path, Tensor<U>::from(t.shape(), std::move(data), true));
        }
        return out;
    }

private:
    std::map<std::string, Tensor<T>> params_;
    std::uint64_t rng_seed_;
};

/// Checkpoint layout: "PCDK1", u32 count, then per parameter u32 path length,
/// path bytes, u32 rank, u32 dims[rank], little-endian f32 payload.
template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::filesystem::path& file);
template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ParamStore<T>& store);

/// Overwrites values of `store` from `file`. Every stored path must exist in
/// `store` with the same shape, and vice versa.
template <typename T>
void load_checkpoint_into(ParamStore<T>& store, const std::filesystem::path& file);

/// Reads a checkpoint as a standalone store (no shape template needed).
ParamStore<float> read_checkpoint(const std::filesystem::path& file);

}  // namespace pcd
