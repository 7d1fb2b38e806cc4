#include "mpe/models.hpp"

#include <map>

namespace mpe {

std::string family_name(Family f) {
  switch (f) {
    case Family::CNN: return "CNN";
    case Family::DCNN: return "DCNN";
    case Family::DRCNN: return "DRCNN";
    case Family::Unet: return "Unet";
    case Family::SAUnet: return "SAUnet";
    case Family::SAUSnet: return "SAUSnet";
    case Family::BLUnet: return "BLUnet";
    case Family::PUnet: return "PUnet";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  static const std::map<std::string, Family> table = {
      {"CNN", Family::CNN},       {"DCNN", Family::DCNN},   {"DRCNN", Family::DRCNN},
      {"Unet", Family::Unet},     {"SAUnet", Family::SAUnet}, {"SAUSnet", Family::SAUSnet},
      {"BLUnet", Family::BLUnet}, {"PUnet", Family::PUnet}};
  auto it = table.find(s);
  MPE_CHECK(it != table.end(), "unknown model family '" << s << "'");
  return it->second;
}

void ModelConfig::validate() const {
  MPE_CHECK(n0 > 0 && n1 > 0 && n2 > 0 && n3 > 0, "channel widths must be positive");
  MPE_CHECK(dropout >= 0.0 && dropout < 1.0, "dropout out of range");
  if (is_unet_family()) {
    MPE_CHECK(gamma > 0, family_name(family) << " requires gamma");
    MPE_CHECK(8 * gamma % 8 == 0, "bottleneck width must divide into 8 heads");
  }
  if (family == Family::SAUnet || family == Family::SAUSnet || family == Family::BLUnet)
    MPE_CHECK(lambda > 0, family_name(family) << " requires lambda");
  if (family == Family::BLUnet) MPE_CHECK(blstm_layers >= 1, "blstm_layers must be >= 1");
}

namespace {

ModelConfig make(Family fam, const std::string& size, int n0, int n1, int n2, int n3, int gamma,
                 int lambda, int blstm_layers = 1, double lr = 1e-3) {
  ModelConfig c;
  c.family = fam;
  c.n0 = n0;
  c.n1 = n1;
  c.n2 = n2;
  c.n3 = n3;
  c.gamma = gamma;
  c.lambda = lambda;
  c.blstm_layers = blstm_layers;
  c.initial_lr = lr;
  c.name = family_name(fam) + ":" + size;
  return c;
}

std::vector<ZooEntry> build_zoo() {
  std::vector<ZooEntry> z;
  auto add = [&](ModelConfig c, int64_t thousands) { z.push_back({std::move(c), thousands}); };

  add(make(Family::CNN, "XS", 20, 20, 10, 1, 0, 0), 48);
  add(make(Family::CNN, "S", 100, 100, 50, 10, 0, 0), 603);
  add(make(Family::CNN, "M", 250, 150, 100, 100, 0, 0), 1813);
  add(make(Family::CNN, "L", 280, 180, 120, 100, 0, 0), 2467);

  // The deeper prefilter stacks need the reduced learning rate at M/L sizes.
  add(make(Family::DCNN, "S", 20, 20, 10, 1, 0, 0), 408);
  add(make(Family::DCNN, "M", 40, 40, 30, 10, 0, 0, 1, 2e-4), 1602);
  add(make(Family::DCNN, "L", 70, 70, 50, 10, 0, 0, 1, 2e-4), 4815);

  add(make(Family::DRCNN, "S", 20, 20, 10, 1, 0, 0), 408);
  add(make(Family::DRCNN, "M", 40, 40, 30, 10, 0, 0, 1, 2e-4), 1602);
  add(make(Family::DRCNN, "L", 70, 70, 50, 10, 0, 0, 1, 2e-4), 4815);

  add(make(Family::Unet, "S", 64, 30, 20, 10, 8, 0), 882);
  add(make(Family::Unet, "M", 128, 100, 80, 50, 8, 0), 1655);
  add(make(Family::Unet, "L", 128, 150, 100, 80, 16, 0), 4552);
  add(make(Family::Unet, "XL", 128, 180, 150, 100, 32, 0), 14252);

  add(make(Family::SAUnet, "M", 64, 30, 20, 10, 8, 1024), 1180);
  add(make(Family::SAUnet, "L", 128, 80, 50, 30, 16, 8192), 7983);
  add(make(Family::SAUnet, "XL", 128, 200, 150, 150, 16, 8192), 10093);
  add(make(Family::SAUnet, "XXL", 128, 200, 150, 150, 32, 8192), 23439);

  add(make(Family::SAUSnet, "M", 64, 30, 20, 10, 8, 512), 1213);
  add(make(Family::SAUSnet, "L", 128, 80, 50, 30, 16, 4096), 8115);
  add(make(Family::SAUSnet, "XL", 128, 200, 150, 150, 16, 8192), 14436);
  add(make(Family::SAUSnet, "XXL", 128, 200, 150, 150, 32, 8192), 32371);

  // lambda is half the flattened bottleneck width (8*gamma*13/2), so the
  // bidirectional output maps back without projection; the L size uses a
  // two-layer stack.
  add(make(Family::BLUnet, "M", 64, 30, 20, 10, 4, 208, 1), 1343);
  add(make(Family::BLUnet, "L", 128, 80, 50, 30, 8, 416, 2), 9649);
  add(make(Family::BLUnet, "XXL", 128, 200, 150, 150, 16, 832, 1), 22376);

  add(make(Family::PUnet, "M", 128, 100, 80, 50, 8, 0), 1680);
  add(make(Family::PUnet, "L", 128, 100, 80, 50, 16, 0), 4643);
  add(make(Family::PUnet, "XL", 128, 180, 150, 100, 32, 0), 14598);

  return z;
}

}  // namespace

const std::vector<ZooEntry>& model_zoo() {
  static const std::vector<ZooEntry> zoo = build_zoo();
  return zoo;
}

ModelConfig zoo_config(const std::string& name) {
  for (const auto& e : model_zoo())
    if (e.config.name == name) return e.config;
  throw Error("unknown model configuration '" + name + "'");
}

}  // namespace mpe
