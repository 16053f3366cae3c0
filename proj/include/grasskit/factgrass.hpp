// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Factorized compression of per-layer gradients. A linear layer's gradient
// is a sum of outer products sum_t z_t (x) dz_t, so compressing the two
// factors and combining them per token touches far fewer numbers than the
// p_l = aug_in * d_out entries of the flattened gradient. Three schemes
// share one engine:
//
//   logra      dense factor projections, Kronecker-accumulated
//   factsjlt   the same with SJLT factor projections
//   factgrass  factor masks, Kronecker-accumulated, then one small SJLT
//   factmask   factor masks alone; output is the masked Kronecker buffer
//
// The masked paths accumulate in the working scalar type so they agree
// bitwise with masking the materialized gradient. Dense paths accumulate
// in f64 and cast once at the end.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "grasskit/grass.hpp"
#include "grasskit/mask.hpp"
#include "grasskit/model.hpp"
#include "grasskit/sha256.hpp"
#include "grasskit/sketch.hpp"

namespace grasskit {

// ---------------------------------------------------------------------------
// Flattened layer gradient from a trace. Column-major over the d_out x aug_in
// weight block: flat[j * d_out + r] = sum_t z_in(j, t) * dz_out(r, t), with
// the loop shape and scalar type of the per-sample backward pass, so the
// result equals the corresponding slice of the flat gradient bit for bit.

template <typename Scalar>
void check_layer_trace(const LinearLayerTrace<Scalar>& tr) {
  if (tr.z_in.rows() <= 0 || tr.dz_out.rows() <= 0 || tr.z_in.cols() <= 0) {
    throw DataError("layer trace: empty factors");
  }
  if (tr.z_in.cols() != tr.dz_out.cols()) {
    throw DataError("layer trace: token counts differ");
  }
}

template <typename Scalar>
VecX<Scalar> materialize_layer_grad(const LinearLayerTrace<Scalar>& tr) {
  check_layer_trace(tr);
  const Index aug = tr.z_in.rows();
  const Index dout = tr.dz_out.rows();
  const Index T = tr.z_in.cols();
  if (aug * dout > Index(10000000)) {
    throw GuardError("refusing to materialize a layer gradient with more than 1e7 entries");
  }
  VecX<Scalar> flat(aug * dout);
  for (Index j = 0; j < aug; ++j) {
    for (Index r = 0; r < dout; ++r) {
      Scalar acc(0);
      for (Index t = 0; t < T; ++t) acc += tr.z_in(j, t) * tr.dz_out(r, t);
      flat[j * dout + r] = acc;
    }
  }
  return flat;
}

// ---------------------------------------------------------------------------
// One linear map applied to a factor (a z_in or dz_out column).

struct FactorMap {
  enum class Kind { Identity, Dense, Sjlt, Mask };

  Kind kind = Kind::Identity;
  Index dim = 0;     // Identity input and output dim
  SketchSpec sketch; // Dense and Sjlt
  MaskSpec mask;     // Mask

  static FactorMap identity(Index d) {
    FactorMap f;
    f.kind = Kind::Identity;
    f.dim = d;
    return f;
  }

  static FactorMap projection(const SketchSpec& s) {
    FactorMap f;
    f.kind = s.kind == SketchKind::SJLT ? Kind::Sjlt : Kind::Dense;
    f.sketch = s;
    return f;
  }

  static FactorMap masked(MaskSpec m) {
    FactorMap f;
    f.kind = Kind::Mask;
    f.mask = std::move(m);
    return f;
  }

  Index input_dim() const {
    switch (kind) {
      case Kind::Identity: return dim;
      case Kind::Dense:
      case Kind::Sjlt: return sketch.input_dim;
      case Kind::Mask: return mask.input_dim;
    }
    return 0;
  }

  Index output_dim() const {
    switch (kind) {
      case Kind::Identity: return dim;
      case Kind::Dense:
      case Kind::Sjlt: return sketch.target_dim;
      case Kind::Mask: return mask.output_dim();
    }
    return 0;
  }

  // Gathers keep the working scalar type exactly; anything with arithmetic
  // runs through the f64 path.
  bool exact() const { return kind == Kind::Identity || kind == Kind::Mask; }

  void validate() const {
    switch (kind) {
      case Kind::Identity:
        if (dim <= 0) throw ConfigError("factor map: identity dim must be positive");
        return;
      case Kind::Dense:
        if (sketch.kind == SketchKind::FJLT || sketch.kind == SketchKind::SJLT) {
          throw ConfigError("factor map: dense kind must be gaussian or rademacher");
        }
        sketch.validate();
        return;
      case Kind::Sjlt:
        if (sketch.kind != SketchKind::SJLT) {
          throw ConfigError("factor map: sjlt kind mismatch");
        }
        sketch.validate();
        return;
      case Kind::Mask:
        mask.validate();
        return;
    }
  }
};

namespace detail {

// Applies one factor map to a column, writing output_dim values into `out`.
// Returns the MACs charged: gathers cost one per kept entry, dense maps
// k * d, SJLT s per input nonzero, identity nothing.
template <typename Acc, typename Scalar>
std::uint64_t eval_factor(const FactorMap& f, const Scalar* col, Acc* out) {
  switch (f.kind) {
    case FactorMap::Kind::Identity: {
      for (Index j = 0; j < f.dim; ++j) out[j] = static_cast<Acc>(col[j]);
      return 0;
    }
    case FactorMap::Kind::Mask: {
      const auto& idx = f.mask.indices;
      for (size_t t = 0; t < idx.size(); ++t) {
        out[t] = static_cast<Acc>(col[idx[t]]);
      }
      return idx.size();
    }
    case FactorMap::Kind::Dense: {
      const Index k = f.sketch.target_dim;
      const Index d = f.sketch.input_dim;
      const double scale =
          f.sketch.normalize ? 1.0 / std::sqrt(static_cast<double>(k)) : 1.0;
      const bool gauss = f.sketch.kind == SketchKind::Gaussian;
      for (Index i = 0; i < k; ++i) {
        double acc = 0.0;
        for (Index j = 0; j < d; ++j) {
          const double e = gauss ? gaussian_entry(f.sketch.seed, i, j, d)
                                 : rademacher_entry(f.sketch.seed, i, j, d);
          acc += e * static_cast<double>(col[j]);
        }
        out[i] = static_cast<Acc>(acc * scale);
      }
      return static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(d);
    }
    case FactorMap::Kind::Sjlt: {
      const Index k = f.sketch.target_dim;
      const Index d = f.sketch.input_dim;
      for (Index i = 0; i < k; ++i) out[i] = Acc(0);
      std::uint64_t macs = 0;
      for (Index j = 0; j < d; ++j) {
        if (col[j] == Scalar(0)) continue;
        const double x = static_cast<double>(col[j]);
        sjlt_visit_column(f.sketch, j, [&](Index row, int sign) {
          out[row] += static_cast<Acc>(sign > 0 ? x : -x);
        });
        macs += static_cast<std::uint64_t>(f.sketch.sparsity);
      }
      if (f.sketch.normalize) {
        const Acc scale =
            static_cast<Acc>(1.0 / std::sqrt(static_cast<double>(f.sketch.sparsity)));
        for (Index i = 0; i < k; ++i) out[i] *= scale;
      }
      return macs;
    }
  }
  return 0;
}

// The shared engine. Per token: evaluate both factor maps, accumulate the
// outer product into the a x b Kronecker buffer (token-major, then input
// index, then output index, so masked runs replay the materialized sums in
// the same order). Optionally finish with one SJLT over the buffer, with
// the exact visit order and f64 accumulator of sjlt_project.
template <typename Acc, typename Scalar>
VecX<Scalar> run_factorized(const FactorMap& fin, const FactorMap& fout,
                            const SketchSpec* final_sjlt,
                            const LinearLayerTrace<Scalar>& tr, OpStats* ops,
                            AllocStats* alloc) {
  const Index a = fin.output_dim();
  const Index b = fout.output_dim();
  const Index T = tr.z_in.cols();
  const Index aug = tr.z_in.rows();
  const Index dout = tr.dz_out.rows();
  if (a * b > Index(100000000)) {
    throw GuardError("refusing to allocate a Kronecker buffer with more than 1e8 entries");
  }
  TrackedBuffer<Acc> u(a, alloc);
  TrackedBuffer<Acc> v(b, alloc);
  TrackedBuffer<Acc> kron(a * b, alloc);
  kron.set_zero();
  std::uint64_t macs = 0;
  for (Index t = 0; t < T; ++t) {
    macs += eval_factor(fin, tr.z_in.data() + static_cast<size_t>(t) * aug, u.data());
    macs += eval_factor(fout, tr.dz_out.data() + static_cast<size_t>(t) * dout, v.data());
    Acc* g = kron.data();
    for (Index j = 0; j < a; ++j) {
      const Acc uj = u[j];
      Acc* row = g + j * b;
      for (Index r = 0; r < b; ++r) row[r] += uj * v[r];
    }
    macs += static_cast<std::uint64_t>(a) * static_cast<std::uint64_t>(b);
  }
  VecX<Scalar> out;
  if (final_sjlt == nullptr) {
    out.resize(a * b);
    for (Index i = 0; i < a * b; ++i) out[i] = static_cast<Scalar>(kron[i]);
  } else {
    const Index k = final_sjlt->target_dim;
    TrackedBuffer<double> acc(k, alloc);
    acc.set_zero();
    for (Index j = 0; j < a * b; ++j) {
      if (kron[j] == Acc(0)) continue;
      const double x = static_cast<double>(kron[j]);
      sjlt_visit_column(*final_sjlt, j, [&](Index row, int sign) {
        acc[row] += sign > 0 ? x : -x;
      });
      macs += static_cast<std::uint64_t>(final_sjlt->sparsity);
    }
    const double scale = final_sjlt->normalize
                             ? 1.0 / std::sqrt(static_cast<double>(final_sjlt->sparsity))
                             : 1.0;
    out.resize(k);
    for (Index i = 0; i < k; ++i) out[i] = static_cast<Scalar>(acc[i] * scale);
  }
  if (ops) ops->multiply_adds += macs;
  return out;
}

}  // namespace detail

// Compresses one layer trace through a pair of factor maps and an optional
// final SJLT over the Kronecker buffer. Auxiliary memory stays O(a + b + ab)
// for factor dims a, b; the flattened gradient is never formed.
template <typename Scalar>
VecX<Scalar> factorized_compress(const FactorMap& fin, const FactorMap& fout,
                                 const SketchSpec* final_sjlt,
                                 const LinearLayerTrace<Scalar>& tr,
                                 OpStats* ops = nullptr,
                                 AllocStats* alloc = nullptr) {
  check_layer_trace(tr);
  fin.validate();
  fout.validate();
  if (fin.input_dim() != tr.z_in.rows()) {
    throw DataError("factorized: input factor expects dim " +
                    std::to_string(fin.input_dim()) + " but the trace has " +
                    std::to_string(tr.z_in.rows()));
  }
  if (fout.input_dim() != tr.dz_out.rows()) {
    throw DataError("factorized: output factor expects dim " +
                    std::to_string(fout.input_dim()) + " but the trace has " +
                    std::to_string(tr.dz_out.rows()));
  }
  if (final_sjlt != nullptr) {
    if (final_sjlt->kind != SketchKind::SJLT) {
      throw ConfigError("factorized: the final stage must be an sjlt");
    }
    const Index kl = fin.output_dim() * fout.output_dim();
    if (final_sjlt->input_dim != kl) {
      throw ConfigError("factorized: final sjlt input dim (" +
                        std::to_string(final_sjlt->input_dim) +
                        ") must equal the factor product (" + std::to_string(kl) + ")");
    }
    if (final_sjlt->target_dim > kl) {
      throw ConfigError("factorized: k (" + std::to_string(final_sjlt->target_dim) +
                        ") exceeds the masked dim (" + std::to_string(kl) + ")");
    }
  }
  if (fin.exact() && fout.exact()) {
    return detail::run_factorized<Scalar>(fin, fout, final_sjlt, tr, ops, alloc);
  }
  return detail::run_factorized<double>(fin, fout, final_sjlt, tr, ops, alloc);
}

// Dense (or SJLT) factor projections, Kronecker-combined. Output dim is
// kin * kout. Cost per token: kin * d_in + kout * d_out + kin * kout.
template <typename Scalar>
VecX<Scalar> logra_compress(const SketchSpec& proj_in, const SketchSpec& proj_out,
                            const LinearLayerTrace<Scalar>& tr,
                            OpStats* ops = nullptr, AllocStats* alloc = nullptr) {
  return factorized_compress(FactorMap::projection(proj_in),
                             FactorMap::projection(proj_out), nullptr, tr, ops,
                             alloc);
}

// Factor masks, Kronecker-combined, then one SJLT over the k'_in * k'_out
// buffer. Cost per token: k'_in + k'_out + k'_in * k'_out, plus one final
// pass of at most s * k'_in * k'_out.
template <typename Scalar>
VecX<Scalar> factgrass_compress(const MaskSpec& mask_in, const MaskSpec& mask_out,
                                const SketchSpec& final_sjlt,
                                const LinearLayerTrace<Scalar>& tr,
                                OpStats* ops = nullptr,
                                AllocStats* alloc = nullptr) {
  return factorized_compress(FactorMap::masked(mask_in),
                             FactorMap::masked(mask_out), &final_sjlt, tr, ops,
                             alloc);
}

// Factor masks alone; the output is the masked Kronecker buffer itself,
// equal to gathering the flattened gradient at {i_in * d_out + i_out}.
template <typename Scalar>
VecX<Scalar> factmask_compress(const MaskSpec& mask_in, const MaskSpec& mask_out,
                               const LinearLayerTrace<Scalar>& tr,
                               OpStats* ops = nullptr,
                               AllocStats* alloc = nullptr) {
  return factorized_compress(FactorMap::masked(mask_in),
                             FactorMap::masked(mask_out), nullptr, tr, ops,
                             alloc);
}

// ---------------------------------------------------------------------------
// Whole-model plans: one bound factor pipeline per linear layer.

struct LayerPlan {
  int layer = -1;
  FactorMap in;
  FactorMap out;
  bool has_final = false;
  SketchSpec final_sjlt;

  Index output_dim() const {
    return has_final ? final_sjlt.target_dim : in.output_dim() * out.output_dim();
  }
};

struct FactorizedCompressor {
  std::vector<LayerPlan> plans;

  const LayerPlan* find(int layer) const {
    for (const auto& p : plans) {
      if (p.layer == layer) return &p;
    }
    return nullptr;
  }

  Index output_dim() const {
    Index total = 0;
    for (const auto& p : plans) total += p.output_dim();
    return total;
  }

  // Stable identity: masks hash their kept indices, so a selective mask and
  // a random mask that happen to share a seed cannot collide.
  Digest256 fingerprint() const {
    std::string desc;
    for (const auto& p : plans) {
      desc += "layer=" + std::to_string(p.layer) + ";in=" + describe(p.in) +
              ";out=" + describe(p.out);
      if (p.has_final) {
        desc += ";final=sjlt:k=" + std::to_string(p.final_sjlt.target_dim) +
                ",s=" + std::to_string(p.final_sjlt.sparsity) +
                ",seed=" + std::to_string(p.final_sjlt.seed) +
                ",norm=" + (p.final_sjlt.normalize ? "1" : "0");
      }
      desc += "\n";
    }
    return sha256(desc);
  }

 private:
  static std::string describe(const FactorMap& f) {
    switch (f.kind) {
      case FactorMap::Kind::Identity:
        return "id:d=" + std::to_string(f.dim);
      case FactorMap::Kind::Dense:
      case FactorMap::Kind::Sjlt: {
        std::string s = std::string(sketch_kind_name(f.sketch.kind)) +
                        ":d=" + std::to_string(f.sketch.input_dim) +
                        ",k=" + std::to_string(f.sketch.target_dim) +
                        ",seed=" + std::to_string(f.sketch.seed) +
                        ",norm=" + (f.sketch.normalize ? "1" : "0");
        if (f.kind == FactorMap::Kind::Sjlt) {
          s += ",s=" + std::to_string(f.sketch.sparsity);
        }
        return s;
      }
      case FactorMap::Kind::Mask: {
        const Digest256 d = sha256(f.mask.indices.data(),
                                   f.mask.indices.size() * sizeof(Index));
        return "mask:d=" + std::to_string(f.mask.input_dim) +
               ",k=" + std::to_string(f.mask.output_dim()) + ",idx=" + to_hex(d);
      }
    }
    return "?";
  }
};

// Compresses every layer trace and concatenates the blocks in trace order.
// `layer_ops`, when given, receives one entry per trace with that layer's
// MAC count.
template <typename Scalar>
VecX<Scalar> compress_model_grads(const FactorizedCompressor& fc,
                                  const std::vector<LinearLayerTrace<Scalar>>& traces,
                                  OpStats* ops = nullptr, AllocStats* alloc = nullptr,
                                  std::vector<OpStats>* layer_ops = nullptr) {
  if (traces.empty()) throw DataError("factorized: no layer traces");
  Index total = 0;
  for (const auto& tr : traces) {
    const LayerPlan* plan = fc.find(tr.layer);
    if (plan == nullptr) {
      throw ConfigError("factorized compressor has no plan for layer " +
                        std::to_string(tr.layer));
    }
    total += plan->output_dim();
  }
  VecX<Scalar> out(total);
  if (layer_ops) layer_ops->clear();
  Index off = 0;
  for (const auto& tr : traces) {
    const LayerPlan* plan = fc.find(tr.layer);
    OpStats here;
    out.segment(off, plan->output_dim()) = factorized_compress(
        plan->in, plan->out, plan->has_final ? &plan->final_sjlt : nullptr, tr,
        &here, alloc);
    off += plan->output_dim();
    if (ops) ops->multiply_adds += here.multiply_adds;
    if (layer_ops) layer_ops->push_back(here);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Text grammar for factorized plans, one entry per layer directive:
//
//   factgrass:layer=*,k=4096,kin'=2*kin,kout'=2*kout,s=1,seed=9
//   logra:layer=0,kin=16,kout=16,seed=3
//   factsjlt:layer=1,k=256,sin=1,sout=1
//   factmask:layer=2,kin'=8,kout'=8
//
// `layer=*` (the default) expands to every linear layer at bind time with
// independent per-layer seeds. For factgrass, kin/kout default to sqrt(k)
// and the mask dims to twice that; `kin'=c*kin` scales the default instead
// of fixing an absolute count.

enum class FactorScheme { LoGra, FactGrass, FactMask, FactSjlt };

inline const char* factor_scheme_name(FactorScheme s) {
  switch (s) {
    case FactorScheme::LoGra: return "logra";
    case FactorScheme::FactGrass: return "factgrass";
    case FactorScheme::FactMask: return "factmask";
    case FactorScheme::FactSjlt: return "factsjlt";
  }
  return "?";
}

struct FactorEntry {
  FactorScheme scheme = FactorScheme::FactGrass;
  int layer = -1;  // -1 targets every layer
  Index k = 0;     // final dim per layer
  Index kin = 0, kout = 0;              // dense or sjlt factor dims
  Index kin_prime = 0, kout_prime = 0;  // absolute mask dims
  Index kin_mult = 0, kout_mult = 0;    // mask dims as multiples of sqrt(k)
  int s = 1;                            // final sjlt sparsity
  int sin = 1, sout = 1;                // factor sjlt sparsity
  std::uint64_t seed = 0;
  bool normalize = false;
};

struct FactorizedSpec {
  std::vector<FactorEntry> entries;
};

namespace detail {

// Key names may carry a prime, e.g. kin'.
inline std::string factor_key(SpecReader& r) {
  std::string key = r.ident();
  if (!r.done() && r.peek() == '\'') {
    key += '\'';
    ++r.pos;
  }
  return key;
}

// A mask dim is either an absolute count or `c*kin` / `c*kout`.
inline void parse_mask_dim(SpecReader& r, const std::string& key,
                           const std::string& val, size_t val_at, Index* abs_out,
                           Index* mult_out) {
  const size_t star = val.find('*');
  if (star == std::string::npos) {
    *abs_out = static_cast<Index>(r.number(val, val_at));
    if (*abs_out <= 0) r.fail(key + " must be positive", val_at);
    return;
  }
  const std::string base = key.substr(0, key.size() - 1);
  if (val.substr(star + 1) != base) {
    r.fail(key + " can only scale " + base, val_at);
  }
  *mult_out = static_cast<Index>(r.number(val.substr(0, star), val_at));
  if (*mult_out <= 0) r.fail(key + " multiplier must be positive", val_at);
}

}  // namespace detail

inline FactorizedSpec parse_factorized(const std::string& text) {
  detail::SpecReader r{text};
  FactorizedSpec spec;
  if (r.done()) r.fail("empty spec", 0);
  while (true) {
    const size_t entry_at = r.pos;
    const std::string name = r.ident();
    FactorEntry e;
    if (name == "logra") e.scheme = FactorScheme::LoGra;
    else if (name == "factgrass") e.scheme = FactorScheme::FactGrass;
    else if (name == "factmask") e.scheme = FactorScheme::FactMask;
    else if (name == "factsjlt") e.scheme = FactorScheme::FactSjlt;
    else r.fail("unknown scheme \"" + name + "\"", entry_at);
    const bool masks = e.scheme == FactorScheme::FactGrass ||
                       e.scheme == FactorScheme::FactMask;
    const bool dense = e.scheme == FactorScheme::LoGra ||
                       e.scheme == FactorScheme::FactSjlt;
    if (!r.done() && r.peek() == ':') {
      ++r.pos;
      while (true) {
        const size_t key_at = r.pos;
        const std::string key = detail::factor_key(r);
        if (r.done() || r.peek() != '=') r.fail("expected '=' after \"" + key + "\"", r.pos);
        ++r.pos;
        const size_t val_at = r.pos;
        const std::string val = r.value();
        if (key == "layer") {
          if (val != "*") {
            e.layer = static_cast<int>(r.number(val, val_at));
          }
        } else if (key == "seed") {
          e.seed = r.number(val, val_at);
        } else if (key == "k" && e.scheme != FactorScheme::FactMask) {
          e.k = static_cast<Index>(r.number(val, val_at));
          if (e.k <= 0) r.fail("k must be positive", val_at);
        } else if (key == "kin" && dense) {
          e.kin = static_cast<Index>(r.number(val, val_at));
          if (e.kin <= 0) r.fail("kin must be positive", val_at);
        } else if (key == "kout" && dense) {
          e.kout = static_cast<Index>(r.number(val, val_at));
          if (e.kout <= 0) r.fail("kout must be positive", val_at);
        } else if (key == "kin'" && masks) {
          detail::parse_mask_dim(r, key, val, val_at, &e.kin_prime, &e.kin_mult);
        } else if (key == "kout'" && masks) {
          detail::parse_mask_dim(r, key, val, val_at, &e.kout_prime, &e.kout_mult);
        } else if (key == "s" && e.scheme == FactorScheme::FactGrass) {
          e.s = static_cast<int>(r.number(val, val_at));
          if (e.s <= 0) r.fail("s must be positive", val_at);
        } else if (key == "sin" && e.scheme == FactorScheme::FactSjlt) {
          e.sin = static_cast<int>(r.number(val, val_at));
        } else if (key == "sout" && e.scheme == FactorScheme::FactSjlt) {
          e.sout = static_cast<int>(r.number(val, val_at));
        } else if (key == "norm" && e.scheme != FactorScheme::FactMask) {
          e.normalize = r.number(val, val_at) != 0;
        } else {
          r.fail("unknown key \"" + key + "\" for " + name, key_at);
        }
        if (r.done() || r.peek() != ',') break;
        ++r.pos;
      }
    }
    if (e.scheme == FactorScheme::FactGrass && e.k <= 0) {
      r.fail("factgrass is missing its target dim k", entry_at);
    }
    if (e.scheme == FactorScheme::FactMask &&
        (e.kin_prime <= 0 || e.kout_prime <= 0)) {
      r.fail("factmask needs absolute kin'= and kout'=", entry_at);
    }
    if (dense) {
      if (e.k <= 0 && (e.kin <= 0 || e.kout <= 0)) {
        r.fail(name + " needs k= or both kin= and kout=", entry_at);
      }
      if (e.k > 0 && e.kin > 0 && e.kout > 0 && e.k != e.kin * e.kout) {
        r.fail("k (" + std::to_string(e.k) + ") does not match kin*kout (" +
                   std::to_string(e.kin * e.kout) + ")",
               entry_at);
      }
    }
    spec.entries.push_back(std::move(e));
    if (r.done()) break;
    if (r.peek() != '+') r.fail("expected '+' between entries", r.pos);
    ++r.pos;
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Binding a parsed spec to concrete layer shapes.

struct LayerShape {
  Index aug_in = 0;  // bias column included
  Index d_out = 0;
};

template <typename Scalar>
std::vector<LayerShape> layer_shapes(const MlpModel<Scalar>& model) {
  model.validate();
  std::vector<LayerShape> shapes;
  shapes.reserve(model.layers.size());
  for (const auto& l : model.layers) {
    shapes.push_back({l.aug_in_dim(), l.out_dim()});
  }
  return shapes;
}

// Trained masks for a layer, keyed by layer index: (input side, output side).
using SelectiveMaskTable = std::map<int, std::pair<MaskSpec, MaskSpec>>;

namespace detail {

inline Index derived_factor_dim(const FactorEntry& e, int layer) {
  const Index root = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(e.k))));
  if (root * root != e.k) {
    throw ConfigError("factorized: k=" + std::to_string(e.k) +
                      " at layer " + std::to_string(layer) +
                      " is not a perfect square; give explicit factor dims");
  }
  return root;
}

// Per-layer, per-side seeds derived from the entry seed, so layer=* never
// reuses a mask or projection across layers.
inline std::uint64_t side_seed(const FactorEntry& e, int layer, int side) {
  return rng::draw(e.seed, rng::kLayerExpand, static_cast<std::uint64_t>(layer),
                   static_cast<std::uint64_t>(side));
}

inline FactorMap bind_mask_side(const FactorEntry& e, int layer, bool input_side,
                                Index dim, const SelectiveMaskTable* selective) {
  const char* side_name = input_side ? "kin'" : "kout'";
  const Index abs = input_side ? e.kin_prime : e.kout_prime;
  const Index mult = input_side ? e.kin_mult : e.kout_mult;
  if (selective != nullptr) {
    const auto it = selective->find(layer);
    if (it != selective->end()) {
      const MaskSpec& m = input_side ? it->second.first : it->second.second;
      if (m.input_dim != dim) {
        throw ConfigError("factorized: selective mask for layer " +
                          std::to_string(layer) + " expects input dim " +
                          std::to_string(m.input_dim) + " but the layer has " +
                          std::to_string(dim));
      }
      if (abs > 0 && m.output_dim() != abs) {
        throw ConfigError("factorized: selective mask for layer " +
                          std::to_string(layer) + " keeps " +
                          std::to_string(m.output_dim()) + " but the spec declares " +
                          side_name + "=" + std::to_string(abs));
      }
      return FactorMap::masked(m);
    }
  }
  Index kp = abs;
  if (kp <= 0) {
    const Index base = derived_factor_dim(e, layer);
    kp = (mult > 0 ? mult : 2) * base;
  }
  if (kp > dim) {
    throw ConfigError("factorized: " + std::string(side_name) + " (" +
                      std::to_string(kp) + ") exceeds layer " +
                      std::to_string(layer) + (input_side ? " input dim (" : " output dim (") +
                      std::to_string(dim) + ")");
  }
  return FactorMap::masked(random_mask(dim, kp, side_seed(e, layer, input_side ? 0 : 1)));
}

inline LayerPlan bind_entry(const FactorEntry& e, int layer, const LayerShape& shape,
                            const SelectiveMaskTable* selective) {
  LayerPlan plan;
  plan.layer = layer;
  switch (e.scheme) {
    case FactorScheme::FactGrass: {
      plan.in = bind_mask_side(e, layer, true, shape.aug_in, selective);
      plan.out = bind_mask_side(e, layer, false, shape.d_out, selective);
      const Index kl = plan.in.output_dim() * plan.out.output_dim();
      if (e.k > kl) {
        throw ConfigError("factorized: k (" + std::to_string(e.k) +
                          ") exceeds the masked dim (" + std::to_string(kl) +
                          ") at layer " + std::to_string(layer));
      }
      plan.has_final = true;
      plan.final_sjlt = {SketchKind::SJLT, kl, e.k, e.s, side_seed(e, layer, 2),
                         e.normalize};
      break;
    }
    case FactorScheme::FactMask: {
      plan.in = bind_mask_side(e, layer, true, shape.aug_in, selective);
      plan.out = bind_mask_side(e, layer, false, shape.d_out, selective);
      break;
    }
    case FactorScheme::LoGra:
    case FactorScheme::FactSjlt: {
      const Index kin = e.kin > 0 ? e.kin : derived_factor_dim(e, layer);
      const Index kout = e.kout > 0 ? e.kout : derived_factor_dim(e, layer);
      const bool sparse = e.scheme == FactorScheme::FactSjlt;
      const SketchKind kind = sparse ? SketchKind::SJLT : SketchKind::Gaussian;
      plan.in = FactorMap::projection({kind, shape.aug_in, kin,
                                       sparse ? e.sin : 1, side_seed(e, layer, 0),
                                       e.normalize});
      plan.out = FactorMap::projection({kind, shape.d_out, kout,
                                        sparse ? e.sout : 1, side_seed(e, layer, 1),
                                        e.normalize});
      break;
    }
  }
  plan.in.validate();
  plan.out.validate();
  return plan;
}

}  // namespace detail

inline FactorizedCompressor bind_factorized(const FactorizedSpec& spec,
                                            const std::vector<LayerShape>& shapes,
                                            const SelectiveMaskTable* selective = nullptr) {
  if (spec.entries.empty()) throw ConfigError("factorized: empty spec");
  if (shapes.empty()) throw ConfigError("factorized: no layer shapes");
  FactorizedCompressor fc;
  std::vector<bool> taken(shapes.size(), false);
  for (const auto& e : spec.entries) {
    std::vector<int> targets;
    if (e.layer < 0) {
      for (size_t l = 0; l < shapes.size(); ++l) targets.push_back(static_cast<int>(l));
    } else {
      if (e.layer >= static_cast<int>(shapes.size())) {
        throw ConfigError("factorized: layer " + std::to_string(e.layer) +
                          " out of range (model has " +
                          std::to_string(shapes.size()) + " linear layers)");
      }
      targets.push_back(e.layer);
    }
    for (int l : targets) {
      if (taken[static_cast<size_t>(l)]) {
        throw ConfigError("factorized: two entries target layer " + std::to_string(l));
      }
      taken[static_cast<size_t>(l)] = true;
      fc.plans.push_back(detail::bind_entry(e, l, shapes[static_cast<size_t>(l)], selective));
    }
  }
  return fc;
}

}  // namespace grasskit
