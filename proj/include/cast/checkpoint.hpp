#pragma once

#include "cast/parameter.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cast {

/// Serialised model state: "CASTCKPT\x01", u64 config hash, u32 record count,
/// then per parameter (u32 name length, name, u32 rank, u32 extents...,
/// u8 frozen, little-endian f32 values), then a CRC32 of all preceding bytes.
template <class Scalar>
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore<Scalar>& store, std::uint64_t config_hash);

template <class Scalar>
void save_checkpoint(const ParameterStore<Scalar>& store, std::uint64_t config_hash, const std::string& path);

/// Overwrites every parameter of `store` from the file and returns the stored
/// config hash. A missing or extra parameter raises ConfigError, a shape or
/// frozen-flag mismatch raises DimensionError; both name the parameter.
template <class Scalar>
std::uint64_t load_checkpoint(ParameterStore<Scalar>& store, const std::string& path);

/// SHA-256 (hex) over the names, shapes and raw values of the frozen parameters.
template <class Scalar>
std::string frozen_digest(const ParameterStore<Scalar>& store);

}  // namespace cast
