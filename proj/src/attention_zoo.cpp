#include "dfcr/attention_zoo.hpp"

#include <cmath>

namespace dfcr {

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::Se:
      return "se";
    case AttentionVariant::Eca:
      return "eca";
    case AttentionVariant::Cbam:
      return "cbam";
    case AttentionVariant::CdlmLfem:
      return "cdlm_lfem";
  }
  return "unknown";
}

AttentionVariant parse_attention(const std::string& name) {
  if (name == "se") return AttentionVariant::Se;
  if (name == "eca") return AttentionVariant::Eca;
  if (name == "cbam") return AttentionVariant::Cbam;
  if (name == "cdlm_lfem") return AttentionVariant::CdlmLfem;
  throw ConfigError("unknown attention variant '" + name + "' (expected se|eca|cbam|cdlm_lfem)");
}

SeParams::SeParams(std::size_t channels_, std::size_t reduction_, Rng& rng)
    : channels(channels_), reduction(reduction_) {
  if (channels == 0 || reduction == 0 || channels % reduction != 0) {
    throw ConfigError("SE reduction " + std::to_string(reduction) + " must divide " + std::to_string(channels));
  }
  fc1 = nn::Linear(channels, channels / reduction, rng);
  fc2 = nn::Linear(channels / reduction, channels, rng);
}

void SeParams::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  fc1.collect(out, prefix + ".fc1", group);
  fc2.collect(out, prefix + ".fc2", group);
}

std::size_t eca_kernel_size(std::size_t channels) {
  const auto t = static_cast<std::size_t>(std::abs((std::log2(static_cast<double>(channels)) + 1.0) / 2.0));
  return t % 2 ? t : t + 1;
}

EcaParams::EcaParams(std::size_t channels, std::size_t kernel_, Rng& rng)
    : kernel(kernel_ == 0 ? eca_kernel_size(channels) : kernel_) {
  if (kernel % 2 == 0) throw ConfigError("ECA kernel must be odd, got " + std::to_string(kernel));
  weight = nn::make_param(rng.normal_tensor({kernel}, std::sqrt(1.0 / static_cast<double>(kernel))));
}

void EcaParams::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  out.push_back({prefix + ".conv", weight, group});
}

CbamParams::CbamParams(std::size_t channels, std::size_t reduction, std::size_t spatial_kernel, Rng& rng)
    : channel(channels, reduction, rng), spatial(2, 1, spatial_kernel, 1, spatial_kernel / 2, rng) {
  if (spatial_kernel % 2 == 0) throw ConfigError("CBAM spatial kernel must be odd");
}

void CbamParams::collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const {
  channel.collect(out, prefix + ".channel", group);
  spatial.collect(out, prefix + ".spatial", group);
}

ag::Var channel_conv1d(const ag::Var& x, const ag::Var& kernel) {
  if (x.rank() != 2 || kernel.rank() != 1) throw ShapeError("channel_conv1d expects [B,C] and [k]");
  const std::size_t b = x.dim(0), c = x.dim(1), k = kernel.dim(0);
  const long half = static_cast<long>(k / 2);
  Tensor out({b, c});
  const double* xv = x.value().data();
  const double* wv = kernel.value().data();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < c; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const long src = static_cast<long>(i) + static_cast<long>(j) - half;
        if (src >= 0 && src < static_cast<long>(c)) s += wv[j] * xv[n * c + static_cast<std::size_t>(src)];
      }
      out[n * c + i] = s;
    }
  }
  auto nx = x.node();
  auto nw = kernel.node();
  return ag::make_result(std::move(out), {x, kernel}, [nx, nw, b, c, k, half](const Tensor& g, const Tensor&) {
    double* gx = nx->requires_grad ? nx->grad_buffer().data() : nullptr;
    double* gw = nw->requires_grad ? nw->grad_buffer().data() : nullptr;
    const double* xv2 = nx->value.data();
    const double* wv2 = nw->value.data();
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const long src = static_cast<long>(i) + static_cast<long>(j) - half;
          if (src < 0 || src >= static_cast<long>(c)) continue;
          const auto s = static_cast<std::size_t>(src);
          if (gx) gx[n * c + s] += g[n * c + i] * wv2[j];
          if (gw) gw[j] += g[n * c + i] * xv2[n * c + s];
        }
      }
    }
  });
}

ag::Var se_forward(const ag::Var& f, const SeParams& p) {
  if (f.rank() != 4 || f.dim(3) != p.channels) {
    throw ConfigError("SE built for " + std::to_string(p.channels) + " channels applied to " + shape_str(f.shape()));
  }
  auto w = ag::sigmoid(p.fc2(ag::relu(p.fc1(ag::global_avg_pool(f)))));
  return scale_channels(f, w);
}

ag::Var eca_forward(const ag::Var& f, const EcaParams& p) {
  if (f.rank() != 4) throw ShapeError("ECA expects NHWC, got " + shape_str(f.shape()));
  auto w = ag::sigmoid(channel_conv1d(ag::global_avg_pool(f), p.weight));
  return scale_channels(f, w);
}

ag::Var cbam_forward(const ag::Var& f, const CbamParams& p) {
  auto x = gcam_forward(f, p.channel);
  auto stats = ag::concat({ag::mean_axis(x, 3, true), ag::max_axis(x, 3, true)}, 3);  // [B,H,W,2]
  auto gate = ag::sigmoid(p.spatial(stats));                                         // [B,H,W,1]
  return ag::mul(x, gate);
}

}  // namespace dfcr
