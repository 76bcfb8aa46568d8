#include "s2corr/params_io.hpp"

#include <fstream>

namespace s2corr {

namespace {

nlohmann::json scan_config_json(const ScanConfig& c) {
  return {{"d_f", c.d_f},
          {"K", c.heads},
          {"chunk_len", c.chunk_len},
          {"eta_cross", c.eta_cross},
          {"snake", c.snake}};
}

ScanConfig scan_config_from_json(const nlohmann::json& j) {
  ScanConfig c;
  c.d_f = j.at("d_f").get<int>();
  c.heads = j.at("K").get<int>();
  c.chunk_len = j.at("chunk_len").get<int>();
  c.eta_cross = j.at("eta_cross").get<double>();
  c.snake = j.at("snake").get<bool>();
  return c;
}

}  // namespace

template <typename T>
void save_scan_params(const std::filesystem::path& dir, const ScanParams<T>& p,
                      const ScanConfig& cfg) {
  Bundle b = Bundle::create(dir);
  b.put("w_a", p.w_a);
  b.put("b_a", p.b_a);
  b.put("w_b", p.w_b);
  b.put("b_b", p.b_b);
  b.put("w_out", p.w_out);
  b.put("u_out", p.u_out);
  b.put("gamma_prior_logits", p.gamma_logits);
  b.put("mix_w", p.mix_w);
  b.meta() = scan_config_json(cfg);
  b.save();
}

template <typename T>
ScanParams<T> load_scan_params(const std::filesystem::path& dir, ScanConfig* cfg) {
  Bundle b = Bundle::open(dir);
  ScanParams<T> p;
  p.w_a = b.get_as<T>("w_a");
  p.b_a = b.get_as<T>("b_a");
  p.w_b = b.get_as<T>("w_b");
  p.b_b = b.get_as<T>("b_b");
  p.w_out = b.get_as<T>("w_out");
  p.u_out = b.get_as<T>("u_out");
  p.gamma_logits = b.get_as<T>("gamma_prior_logits");
  p.mix_w = b.get_as<T>("mix_w");
  ScanConfig c = scan_config_from_json(b.meta());
  p.heads = c.heads;
  p.validate();
  if (cfg) *cfg = c;
  return p;
}

template <typename T>
void save_pipeline_params(const std::filesystem::path& dir, const PipelineParams<T>& p,
                          const PipelineConfig& cfg) {
  std::filesystem::create_directories(dir);
  {
    Bundle lb = Bundle::create(dir / "lift");
    lb.put("p", p.lift.p);
    lb.save();
  }
  {
    Bundle mb = Bundle::create(dir / "mod");
    mb.put("img_proj", p.mod.img_proj);
    mb.put("txt_proj", p.mod.txt_proj);
    mb.save();
  }
  save_scan_params(dir / "spatial_scan", p.spatial_scan, cfg.scan);
  save_scan_params(dir / "class_scan", p.class_scan, cfg.scan);
  {
    Bundle db = Bundle::create(dir / "decoder");
    db.put("w", p.decoder_w);
    db.put("b", p.decoder_b);
    db.save();
  }
  nlohmann::json j = scan_config_json(cfg.scan);
  j["blocks"] = cfg.blocks;
  j["seed"] = cfg.seed;
  std::ofstream f(dir / "config.json", std::ios::trunc);
  if (!f) throw FormatError("cannot write pipeline config.json");
  f << j.dump(2) << "\n";
}

template <typename T>
PipelineParams<T> load_pipeline_params(const std::filesystem::path& dir, PipelineConfig* cfg) {
  std::ifstream f(dir / "config.json");
  if (!f) throw FormatError("pipeline bundle lacks config.json: " + dir.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("pipeline config.json invalid: " + std::string(e.what()));
  }
  PipelineConfig c;
  c.scan = scan_config_from_json(j);
  c.blocks = j.at("blocks").get<int>();
  c.seed = j.value("seed", std::uint64_t(0));

  PipelineParams<T> p;
  {
    Bundle lb = Bundle::open(dir / "lift");
    p.lift.p = lb.get_as<T>("p");
  }
  {
    Bundle mb = Bundle::open(dir / "mod");
    p.mod.img_proj = mb.get_as<T>("img_proj");
    p.mod.txt_proj = mb.get_as<T>("txt_proj");
  }
  p.spatial_scan = load_scan_params<T>(dir / "spatial_scan");
  p.class_scan = load_scan_params<T>(dir / "class_scan");
  {
    Bundle db = Bundle::open(dir / "decoder");
    p.decoder_w = db.get_as<T>("w");
    p.decoder_b = db.get_as<T>("b");
  }
  p.blocks = c.blocks;
  p.validate();
  if (cfg) *cfg = c;
  return p;
}

template void save_scan_params(const std::filesystem::path&, const ScanParams<float>&,
                               const ScanConfig&);
template void save_scan_params(const std::filesystem::path&, const ScanParams<double>&,
                               const ScanConfig&);
template ScanParams<float> load_scan_params<float>(const std::filesystem::path&, ScanConfig*);
template ScanParams<double> load_scan_params<double>(const std::filesystem::path&, ScanConfig*);
template <typename T>
void save_attn_params(const std::filesystem::path& dir, const AttnParams<T>& p) {
  Bundle b = Bundle::create(dir);
  b.put("spatial_wq", p.spatial_wq);
  b.put("spatial_wk", p.spatial_wk);
  b.put("spatial_wv", p.spatial_wv);
  b.put("class_wq", p.class_wq);
  b.put("class_wk", p.class_wk);
  b.put("class_wv", p.class_wv);
  b.meta()["window"] = p.window;
  b.save();
}

template <typename T>
AttnParams<T> load_attn_params(const std::filesystem::path& dir) {
  Bundle b = Bundle::open(dir);
  AttnParams<T> p;
  p.spatial_wq = b.get_as<T>("spatial_wq");
  p.spatial_wk = b.get_as<T>("spatial_wk");
  p.spatial_wv = b.get_as<T>("spatial_wv");
  p.class_wq = b.get_as<T>("class_wq");
  p.class_wk = b.get_as<T>("class_wk");
  p.class_wv = b.get_as<T>("class_wv");
  p.window = b.meta().at("window").get<int>();
  if (p.window < 0) throw FormatError("attention window radius must be >= 0");
  return p;
}

template void save_attn_params(const std::filesystem::path&, const AttnParams<float>&);
template void save_attn_params(const std::filesystem::path&, const AttnParams<double>&);
template AttnParams<float> load_attn_params<float>(const std::filesystem::path&);
template AttnParams<double> load_attn_params<double>(const std::filesystem::path&);

template void save_pipeline_params(const std::filesystem::path&, const PipelineParams<float>&,
                                   const PipelineConfig&);
template void save_pipeline_params(const std::filesystem::path&, const PipelineParams<double>&,
                                   const PipelineConfig&);
template PipelineParams<float> load_pipeline_params<float>(const std::filesystem::path&,
                                                           PipelineConfig*);
template PipelineParams<double> load_pipeline_params<double>(const std::filesystem::path&,
                                                             PipelineConfig*);

}  // namespace s2corr
