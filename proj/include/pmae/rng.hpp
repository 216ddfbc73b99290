#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

namespace pmae {

using Rng = std::mt19937_64;

// Streams keep independent random consumers apart when deriving from the same counters.
enum class RngStream : std::uint64_t {
    shuffle = 1,
    augment = 2,
    mask = 3,
    ada = 4,
    path_length = 5,
    probe = 6,
    eval_mask = 7,
};

// Counter-based derivation: the generator depends only on its inputs, so any
// position in a run can be reproduced without carrying generator state around.
inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> counters) {
    std::vector<std::uint32_t> words;
    words.reserve(2 + 2 * counters.size());
    auto push = [&](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto c : counters) push(c);
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

inline Rng derive_rng(std::uint64_t seed, RngStream stream, std::uint64_t a, std::uint64_t b = 0) {
    return derive_rng(seed, {static_cast<std::uint64_t>(stream), a, b});
}

inline at::Generator torch_generator(Rng& rng) {
    return at::make_generator<at::CPUGeneratorImpl>(rng());
}

} // namespace pmae
