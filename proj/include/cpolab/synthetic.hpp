// SPDX-License-Identifier: Apache-2.0
//
// Deterministic generators for small annotated corpora. Articles state a few
// facts about a made-up event; consistent summary sentences restate them and
// inconsistent ones swap an entity or number for one the article never
// mentions.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cpolab/corpus.hpp"
#include "cpolab/probe.hpp"

namespace cpolab {

struct SyntheticOptions {
    std::size_t count = 200;
    // Exactly round(count * positive_fraction) records have Y = 1.
    double positive_fraction = 0.5;
    std::uint64_t seed = 0;
};

std::vector<AnnotatedSummary> synthetic_corpus(const SyntheticOptions& options);

// One faithful and one unfaithful summary per article.
std::vector<ProbePair> synthetic_probe_pairs(std::size_t count, std::uint64_t seed);

} // namespace cpolab
