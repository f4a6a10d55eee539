#include "dfcr/lfem.hpp"

namespace dfcr {

LfemParams::LfemParams(std::size_t channels, std::size_t feature_dim, std::size_t width, Rng& rng)
    : fc_f(channels, width, rng), fc_z(feature_dim, width, rng) {}

void LfemParams::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  fc_f.collect(out, prefix + ".fc_f", group);
  fc_z.collect(out, prefix + ".fc_z", group);
}

LfemResult lfem_forward(const ag::Var& f, const ag::Var& z, const LfemParams& p) {
  if (f.rank() != 4 || f.dim(3) != p.fc_f.in_features()) {
    throw ConfigError("LFEM built for " + std::to_string(p.fc_f.in_features()) + " channels applied to " +
                      shape_str(f.shape()));
  }
  if (z.rank() != 3 || z.dim(0) != f.dim(0) || z.dim(1) != p.fc_z.in_features()) {
    throw ConfigError("LFEM key set " + shape_str(z.shape()) + " does not match feature dim " +
                      std::to_string(p.fc_z.in_features()) + " and batch " + std::to_string(f.dim(0)));
  }
  const std::size_t b = f.dim(0), h = f.dim(1), w = f.dim(2), c = f.dim(3);
  const std::size_t n = h * w;
  auto flat = ag::reshape(f, {b, n, c});
  auto fp = p.fc_f(flat);                           // [B,N,C']
  auto zp = p.fc_z(ag::permute(z, {0, 2, 1}));      // [B,K,C']
  auto t = ag::bmm(fp, zp, true);                   // [B,N,K]
  auto contribution = ag::mean_axis(t, 2);          // [B,N]
  auto attention = ag::softmax_last(contribution);  // [B,N]
  auto gated = ag::mul(f, ag::reshape(attention, {b, h, w, 1}));
  return LfemResult{ag::add(f, gated), attention};
}

}  // namespace dfcr
