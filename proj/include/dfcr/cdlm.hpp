#pragma once

// Collaborative dictionary learning.
//
// A sample x in R^d is coded against the transformed dictionary B = W D
// (d×K, one atom per class) by the ridge solution
//
//     s = (B^T B + lambda I)^{-1} B^T x,
//
// reconstructed as y = B s, and trained through the scale-free distance
// || x/|x| - y/|y| ||^2 with x treated as a constant.

#include "dfcr/nn.hpp"

namespace dfcr {

struct Dictionary {
  ag::Var atoms;  // [d, K]

  std::size_t feature_dim() const { return atoms.dim(0); }
  std::size_t size() const { return atoms.dim(1); }
};

/// Zero-mean Gaussian atoms renormalized to unit length; zero atoms are redrawn.
Dictionary make_dictionary(std::size_t feature_dim, std::size_t atoms, Rng& rng);

struct CollabTransform {
  ag::Var weight;  // [d, d]
  double lambda = 0.01;
};

/// Identity plus N(0, noise^2) entries.
CollabTransform make_transform(std::size_t feature_dim, double lambda, Rng& rng, double noise = 0.01);

/// B = W D, [d, K].
ag::Var collab_basis(const Dictionary& dict, const CollabTransform& t);

/// Ridge coefficients for every row of x [N,d] against basis [d,K] -> [N,K].
/// Differentiable in x and basis. Throws NumericError when B^T B + lambda I is
/// not positive definite (only possible for lambda <= 0).
ag::Var solve_coefficients(const ag::Var& x, const ag::Var& basis, double lambda);
ag::Var solve_coefficients(const ag::Var& x, const Dictionary& dict, const CollabTransform& t);

/// y = B s for every row: s [N,K] -> [N,d].
ag::Var reconstruct(const ag::Var& s, const ag::Var& basis);

/// Key semantic set per sample: Z[n][:, k] = s[n,k] * B[:, k], shape [N,d,K].
/// Columns of each Z sum to the reconstruction.
ag::Var key_semantic_set(const ag::Var& s, const ag::Var& basis);

struct DictionaryLossResult {
  ag::Var per_sample;     // [N], zero for skipped samples
  ag::Var mean;           // scalar, sum / N
  std::size_t skipped = 0;
};

/// || x/|x| - y/|y| ||^2 per row. Rows where either norm is zero contribute 0
/// and are counted in `skipped`. With stop_gradient (the training setting) no
/// gradient reaches x through this term.
DictionaryLossResult dictionary_loss(const ag::Var& x, const ag::Var& y, bool stop_gradient = true);

/// The module as used in the network: pooled transformer features are
/// projected to d, coded, reconstructed and scored.
class Cdlm {
 public:
  struct Output {
    ag::Var x;               // [B,d]
    ag::Var basis;           // [d,K]
    ag::Var coefficients;    // [B,K]
    ag::Var reconstruction;  // [B,d]
    ag::Var key_set;         // [B,d,K]
    DictionaryLossResult loss;
  };

  Cdlm() = default;
  Cdlm(std::size_t in_channels, std::size_t feature_dim, std::size_t atoms, double lambda, Rng& rng);

  /// fused: [B,h,w,C] global features.
  Output operator()(const ag::Var& fused, bool stop_gradient = true) const;
  void collect(nn::ParamList& out, const std::string& prefix, const std::string& group) const;

  Dictionary& dictionary() { return dict_; }
  CollabTransform& transform() { return transform_; }
  const Dictionary& dictionary() const { return dict_; }
  const CollabTransform& transform() const { return transform_; }

 private:
  nn::Linear input_proj_;
  Dictionary dict_;
  CollabTransform transform_;
};

}  // namespace dfcr
