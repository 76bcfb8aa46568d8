#pragma once

#include "s2corr/refine.hpp"
#include "s2corr/serialize.hpp"

namespace s2corr {

// Ingested inputs: visual features over a token grid, class text embeddings,
// and optionally domain-prompt embeddings. When the bundle carries no
// domain_text_embeddings entry, the class embeddings stand in as the domain
// prompts.
template <typename T>
struct FeatureBundle {
  FeatureGrid<T> features;
  TextEmbeddings<T> text;
  DomainTexts<T> domains;
};

// Expects tensors "visual_features" (HW×d), "text_embeddings" (N_C×d),
// optional "domain_text_embeddings" (D×d); meta carries "class_names" (JSON
// array) and "height"/"width". Missing entries raise FormatError naming the
// entry; present-but-inconsistent shapes raise DimensionError.
template <typename T>
FeatureBundle<T> load_feature_bundle(const std::filesystem::path& dir);

template <typename T>
void save_feature_bundle(const std::filesystem::path& dir, const FeatureGrid<T>& fv,
                         const TextEmbeddings<T>& ft, const DomainTexts<T>* domains = nullptr);

}  // namespace s2corr
