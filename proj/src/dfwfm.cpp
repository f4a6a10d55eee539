#include "dfcr/dfwfm.hpp"

#include "dfcr/gcam.hpp"

namespace dfcr {

SeparableConv::SeparableConv(std::size_t channels, Rng& rng)
    : depthwise(channels, 3, rng), pointwise(channels, channels, rng) {}

ag::Var SeparableConv::operator()(const ag::Var& x) const { return pointwise(depthwise(x)); }

void SeparableConv::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  depthwise.collect(out, prefix + ".depthwise", group);
  pointwise.collect(out, prefix + ".pointwise", group);
}

DfwfmParams::DfwfmParams(std::size_t channels_, Rng& rng)
    : channels(channels_),
      sep_t(channels_, rng),
      sep_c(channels_, rng),
      sep_joint(channels_, rng),
      mix_t(2 * channels_, channels_, rng),
      mix_c(2 * channels_, channels_, rng) {}

void DfwfmParams::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  sep_t.collect(out, prefix + ".sep_t", group);
  sep_c.collect(out, prefix + ".sep_c", group);
  sep_joint.collect(out, prefix + ".sep_joint", group);
  mix_t.collect(out, prefix + ".mix_t", group);
  mix_c.collect(out, prefix + ".mix_c", group);
}

DfwfmResult dfwfm_forward(const ag::Var& ft, const ag::Var& fc, const DfwfmParams& p) {
  if (ft.shape() != fc.shape() || ft.rank() != 4) {
    throw ConfigError("DFWFM branches must share [B,H,W,C]: " + shape_str(ft.shape()) + " vs " +
                      shape_str(fc.shape()));
  }
  if (ft.dim(3) != p.channels) {
    throw ConfigError("DFWFM built for " + std::to_string(p.channels) + " channels, got " + shape_str(ft.shape()));
  }
  DfwfmResult r;
  r.weight_t = ag::sigmoid(ag::global_avg_pool(ft));
  r.weight_c = ag::sigmoid(ag::global_max_pool(fc));
  auto gt = scale_channels(ft, r.weight_t);
  auto gc = scale_channels(fc, r.weight_c);
  auto joint = p.sep_joint(ag::add(gt, gc));
  auto ct = ag::relu(ag::add(p.mix_t(ag::concat({p.sep_t(gt), joint}, 3)), gt));
  auto cc = ag::relu(ag::add(p.mix_c(ag::concat({p.sep_c(gc), joint}, 3)), gc));
  r.output = ag::concat({ct, cc}, 3);
  return r;
}

}  // namespace dfcr
