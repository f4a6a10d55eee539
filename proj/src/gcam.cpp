#include "dfcr/gcam.hpp"

namespace dfcr {

GcamParams::GcamParams(std::size_t channels_, std::size_t reduction_, Rng& rng)
    : channels(channels_), reduction(reduction_) {
  if (channels == 0 || reduction == 0 || channels % reduction != 0) {
    throw ConfigError("GCAM reduction " + std::to_string(reduction) + " must divide channel count " +
                      std::to_string(channels));
  }
  fc1 = nn::Linear(channels, channels / reduction, rng);
  fc2 = nn::Linear(channels / reduction, channels, rng);
}

void GcamParams::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  fc1.collect(out, prefix + ".fc1", group);
  fc2.collect(out, prefix + ".fc2", group);
}

ag::Var gcam_mlp(const ag::Var& pooled, const GcamParams& p) {
  return p.fc2(ag::relu(p.fc1(pooled)));
}

ag::Var gcam_weights(const ag::Var& f, const GcamParams& p) {
  if (f.rank() != 4 || f.dim(3) != p.channels) {
    throw ConfigError("GCAM built for " + std::to_string(p.channels) + " channels applied to " +
                      shape_str(f.shape()));
  }
  auto logits = ag::add(gcam_mlp(ag::global_max_pool(f), p), gcam_mlp(ag::global_avg_pool(f), p));
  return ag::sigmoid(logits);
}

ag::Var gcam_forward(const ag::Var& f, const GcamParams& p) {
  return scale_channels(f, gcam_weights(f, p));
}

ag::Var scale_channels(const ag::Var& f, const ag::Var& weights) {
  return ag::mul(f, ag::reshape(weights, {weights.dim(0), 1, 1, weights.dim(1)}));
}

}  // namespace dfcr
