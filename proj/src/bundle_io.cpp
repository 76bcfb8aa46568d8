#include "s2corr/bundle_io.hpp"

namespace s2corr {

template <typename T>
FeatureBundle<T> load_feature_bundle(const std::filesystem::path& dir) {
  Bundle b = Bundle::open(dir);
  for (const char* required : {"visual_features", "text_embeddings"})
    if (!b.has(required))
      throw FormatError("bundle missing required entry \"" + std::string(required) + "\"");
  if (!b.meta().contains("class_names") || !b.meta()["class_names"].is_array())
    throw FormatError("bundle missing required entry \"class_names\"");
  if (!b.meta().contains("height") || !b.meta().contains("width"))
    throw FormatError("bundle missing required entries \"height\"/\"width\"");

  const int h = b.meta()["height"].get<int>();
  const int w = b.meta()["width"].get<int>();
  Tensor<T> vis = b.get_as<T>("visual_features");
  Tensor<T> txt = b.get_as<T>("text_embeddings");
  std::vector<std::string> names = b.meta()["class_names"].get<std::vector<std::string>>();

  if (vis.rank() != 2 || int(vis.dim(0)) != h * w)
    throw DimensionError("tensor \"visual_features\" must be HW x d for the declared grid " +
                         std::to_string(h) + "x" + std::to_string(w));
  if (txt.rank() != 2 || txt.dim(1) != vis.dim(1))
    throw DimensionError("tensor \"text_embeddings\" must be N_C x d with d matching "
                         "\"visual_features\"");
  if (names.size() != txt.dim(0))
    throw DimensionError("class_names length must match \"text_embeddings\" rows");

  FeatureBundle<T> out;
  out.features = FeatureGrid<T>(h, w, std::move(vis));
  out.text = TextEmbeddings<T>(std::move(txt), std::move(names));
  if (b.has("domain_text_embeddings")) {
    Tensor<T> dom = b.get_as<T>("domain_text_embeddings");
    if (dom.rank() != 2 || dom.dim(1) != out.features.values.dim(1))
      throw DimensionError("tensor \"domain_text_embeddings\" must be D x d");
    out.domains = DomainTexts<T>(std::move(dom));
  } else {
    out.domains = DomainTexts<T>(out.text.values);
  }
  return out;
}

template <typename T>
void save_feature_bundle(const std::filesystem::path& dir, const FeatureGrid<T>& fv,
                         const TextEmbeddings<T>& ft, const DomainTexts<T>* domains) {
  Bundle b = Bundle::create(dir);
  b.put("visual_features", fv.values);
  b.put("text_embeddings", ft.values);
  if (domains) b.put("domain_text_embeddings", domains->values);
  b.meta()["class_names"] = ft.class_names;
  b.meta()["height"] = fv.height;
  b.meta()["width"] = fv.width;
  b.save();
}

template FeatureBundle<float> load_feature_bundle<float>(const std::filesystem::path&);
template FeatureBundle<double> load_feature_bundle<double>(const std::filesystem::path&);
template void save_feature_bundle(const std::filesystem::path&, const FeatureGrid<float>&,
                                  const TextEmbeddings<float>&, const DomainTexts<float>*);
template void save_feature_bundle(const std::filesystem::path&, const FeatureGrid<double>&,
                                  const TextEmbeddings<double>&, const DomainTexts<double>*);

}  // namespace s2corr
