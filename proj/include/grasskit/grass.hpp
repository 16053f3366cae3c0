// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
//
// Stage pipelines over flat gradients: a compressor is an ordered chain of
// mask / projection stages parsed from a compact text spec. The two-stage
// mask+sjlt form is the canonical one; anything else is allowed for
// ablation but flagged.

#pragma once

#include <cctype>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "grasskit/core.hpp"
#include "grasskit/mask.hpp"
#include "grasskit/sha256.hpp"
#include "grasskit/sketch.hpp"

namespace grasskit {

enum class StageKind { Gaussian, Rademacher, Fjlt, Sjlt, RandomMask, SelectiveMask };

inline const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::Gaussian: return "gaussian";
    case StageKind::Rademacher: return "rademacher";
    case StageKind::Fjlt: return "fjlt";
    case StageKind::Sjlt: return "sjlt";
    case StageKind::RandomMask: return "mask";
    case StageKind::SelectiveMask: return "selmask";
  }
  return "?";
}

inline bool stage_is_mask(StageKind k) {
  return k == StageKind::RandomMask || k == StageKind::SelectiveMask;
}

struct Stage {
  StageKind kind = StageKind::Sjlt;
  Index out_dim = 0;       // k for this stage
  int sparsity = 1;        // sjlt only
  std::uint64_t seed = 0;  // unused by selmask
  std::string mask_file;   // selmask only
  bool normalize = false;  // projection stages only

  bool operator==(const Stage&) const = default;
};

struct CompressorSpec {
  std::vector<Stage> pipeline;
  Index input_dim = 0;  // p; 0 until bound

  Index output_dim() const {
    return pipeline.empty() ? 0 : pipeline.back().out_dim;
  }

  bool operator==(const CompressorSpec&) const = default;

  // Canonical two-stage form: mask to k', then sjlt to k <= k'.
  bool is_canonical_grass() const {
    return pipeline.size() == 2 && stage_is_mask(pipeline[0].kind) &&
           pipeline[1].kind == StageKind::Sjlt &&
           pipeline[1].out_dim <= pipeline[0].out_dim;
  }

  std::string to_string() const {
    std::string out;
    for (size_t t = 0; t < pipeline.size(); ++t) {
      const Stage& st = pipeline[t];
      if (t > 0) out += '+';
      out += stage_kind_name(st.kind);
      if (st.kind == StageKind::SelectiveMask) {
        // k is knowable only once the mask file is read, so it appears
        // exactly when resolved
        std::string head = ":";
        if (st.out_dim > 0) {
          out += ":k=" + std::to_string(st.out_dim);
          head = ",";
        }
        out += head + "file=" + st.mask_file;
      } else {
        out += ":k=" + std::to_string(st.out_dim);
        if (st.kind == StageKind::Sjlt) out += ",s=" + std::to_string(st.sparsity);
        out += ",seed=" + std::to_string(st.seed);
      }
      if (st.normalize) out += ",norm=1";
    }
    return out;
  }

  // Stable identity of the bound compressor: same p and same canonical
  // text means provably identical projections.
  Digest256 fingerprint() const {
    if (input_dim <= 0) {
      throw ConfigError("compressor fingerprint requires a bound input dim");
    }
    return sha256("p=" + std::to_string(input_dim) + ";" + to_string());
  }
};

namespace detail {

// Minimal recursive-descent reader for `name(:key=val(,key=val)*)?(+...)`.
struct SpecReader {
  const std::string& text;
  size_t pos = 0;

  bool done() const { return pos >= text.size(); }
  char peek() const { return text[pos]; }

  [[noreturn]] void fail(const std::string& msg, size_t at) const {
    throw ConfigError("compressor spec error at " + std::to_string(at) + ": " + msg);
  }

  std::string ident() {
    const size_t start = pos;
    while (!done() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_')) {
      ++pos;
    }
    if (pos == start) fail("expected a name", start);
    return text.substr(start, pos - start);
  }

  // Values run to the next ',' or '+': paths may contain anything else.
  std::string value() {
    const size_t start = pos;
    while (!done() && peek() != ',' && peek() != '+') ++pos;
    if (pos == start) fail("expected a value", start);
    return text.substr(start, pos - start);
  }

  std::uint64_t number(const std::string& v, size_t at) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
      fail("expected a non-negative integer, got \"" + v + "\"", at);
    }
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
      fail("integer out of range: \"" + v + "\"", at);
    }
  }
};

}  // namespace detail

// Parses the stage-chain grammar, e.g. `mask:k=512,seed=1+sjlt:k=128,s=1,seed=2`.
// Adjacent stage dims are checked here; the input dim p is only known at
// bind time, so stage-0 bounds are checked there.
inline CompressorSpec parse_compressor(const std::string& text) {
  detail::SpecReader r{text};
  CompressorSpec spec;
  if (r.done()) r.fail("empty spec", 0);
  while (true) {
    const size_t stage_at = r.pos;
    const std::string name = r.ident();
    Stage st;
    if (name == "gaussian") st.kind = StageKind::Gaussian;
    else if (name == "rademacher") st.kind = StageKind::Rademacher;
    else if (name == "fjlt") st.kind = StageKind::Fjlt;
    else if (name == "sjlt") st.kind = StageKind::Sjlt;
    else if (name == "mask") st.kind = StageKind::RandomMask;
    else if (name == "selmask") st.kind = StageKind::SelectiveMask;
    else r.fail("unknown stage \"" + name + "\"", stage_at);

    bool have_k = false;
    if (!r.done() && r.peek() == ':') {
      ++r.pos;
      while (true) {
        const size_t key_at = r.pos;
        const std::string key = r.ident();
        if (r.done() || r.peek() != '=') r.fail("expected '=' after \"" + key + "\"", r.pos);
        ++r.pos;
        const size_t val_at = r.pos;
        const std::string val = r.value();
        if (key == "k") {
          // for selmask this is a declared expectation, checked against the
          // file at bind time
          st.out_dim = static_cast<Index>(r.number(val, val_at));
          if (st.out_dim <= 0) r.fail("k must be positive", val_at);
          have_k = true;
        } else if (key == "s" && st.kind == StageKind::Sjlt) {
          st.sparsity = static_cast<int>(r.number(val, val_at));
        } else if (key == "seed" && st.kind != StageKind::SelectiveMask) {
          st.seed = r.number(val, val_at);
        } else if (key == "file" && st.kind == StageKind::SelectiveMask) {
          st.mask_file = val;
        } else if (key == "norm" && !stage_is_mask(st.kind)) {
          st.normalize = r.number(val, val_at) != 0;
        } else {
          r.fail("unknown key \"" + key + "\" for stage " + name, key_at);
        }
        if (r.done() || r.peek() != ',') break;
        ++r.pos;
      }
    }
    if (!have_k && st.kind != StageKind::SelectiveMask) {
      r.fail("stage " + name + " is missing its target dim k", stage_at);
    }
    if (st.kind == StageKind::SelectiveMask && st.mask_file.empty()) {
      r.fail("selmask needs file=<path>", stage_at);
    }
    // selmask dims resolve at bind time (out_dim 0 here), so the chain is
    // checked where both sides are known.
    if (!spec.pipeline.empty() && st.out_dim > 0 &&
        spec.pipeline.back().out_dim > 0) {
      const Index in = spec.pipeline.back().out_dim;
      if (st.out_dim > in) {
        r.fail("k (" + std::to_string(st.out_dim) + ") exceeds stage input dim (" +
                   std::to_string(in) + ")",
               stage_at);
      }
    }
    spec.pipeline.push_back(std::move(st));
    if (r.done()) break;
    if (r.peek() != '+') r.fail("expected '+' between stages", r.pos);
    ++r.pos;
  }
  return spec;
}

// Loads a selective mask referenced from a spec; wired to the mask file
// reader by callers that have one, injected in tests.
using MaskLoader = std::function<MaskSpec(const std::string&)>;

// A spec bound to a concrete input dim: each stage resolved to an
// executable mask or sketch. Pure after construction; concurrent
// compress() calls are safe.
class Compressor {
 public:
  Compressor(CompressorSpec spec, Index input_dim,
             const MaskLoader& load_mask = MaskLoader()) {
    if (input_dim <= 0) throw ConfigError("compressor: input dim must be positive");
    if (spec.pipeline.empty()) throw ConfigError("compressor: empty pipeline");
    spec.input_dim = input_dim;
    Index in = input_dim;
    for (size_t t = 0; t < spec.pipeline.size(); ++t) {
      Stage& st = spec.pipeline[t];
      if (st.kind == StageKind::SelectiveMask) {
        if (!load_mask) {
          throw ConfigError("compressor: selmask stage needs a mask loader");
        }
        MaskSpec m = load_mask(st.mask_file);
        m.validate();
        if (m.input_dim != in) {
          throw ConfigError("compressor: mask file dim " + std::to_string(m.input_dim) +
                            " does not match stage input dim " + std::to_string(in));
        }
        if (st.out_dim > 0 && st.out_dim != m.output_dim()) {
          throw ConfigError("compressor: selmask declared k=" +
                            std::to_string(st.out_dim) + " but file has k'=" +
                            std::to_string(m.output_dim()));
        }
        st.out_dim = m.output_dim();
        masks_.push_back(std::move(m));
        sketches_.emplace_back();
      } else if (st.kind == StageKind::RandomMask) {
        if (st.out_dim > in) {
          throw ConfigError("compressor: mask k (" + std::to_string(st.out_dim) +
                            ") exceeds stage input dim (" + std::to_string(in) + ")");
        }
        masks_.push_back(random_mask(in, st.out_dim, st.seed));
        sketches_.emplace_back();
      } else {
        SketchSpec sk;
        switch (st.kind) {
          case StageKind::Gaussian: sk.kind = SketchKind::Gaussian; break;
          case StageKind::Rademacher: sk.kind = SketchKind::Rademacher; break;
          case StageKind::Fjlt: sk.kind = SketchKind::FJLT; break;
          default: sk.kind = SketchKind::SJLT; break;
        }
        sk.input_dim = in;
        sk.target_dim = st.out_dim;
        sk.sparsity = st.sparsity;
        sk.seed = st.seed;
        sk.normalize = st.normalize;
        if (t > 0 && st.out_dim > in) {
          throw ConfigError("compressor: k (" + std::to_string(st.out_dim) +
                            ") exceeds stage input dim (" + std::to_string(in) + ")");
        }
        sk.validate();
        sketches_.push_back(sk);
        masks_.emplace_back();
      }
      in = st.out_dim;
    }
    spec_ = std::move(spec);
    if (spec_.pipeline.size() > 1 && !spec_.is_canonical_grass()) {
      std::fprintf(stderr,
                   "warning: compressor \"%s\" is not the canonical mask+sjlt form\n",
                   spec_.to_string().c_str());
    }
  }

  const CompressorSpec& spec() const { return spec_; }
  Index input_dim() const { return spec_.input_dim; }
  Index output_dim() const { return spec_.output_dim(); }
  Digest256 fingerprint() const { return spec_.fingerprint(); }

  // The resolved mask of stage t (for persistence); throws if stage t is
  // not a mask stage.
  const MaskSpec& mask_at(size_t t) const {
    if (t >= spec_.pipeline.size() || !stage_is_mask(spec_.pipeline[t].kind)) {
      throw ConfigError("compressor: stage is not a mask");
    }
    return masks_[t];
  }

  template <typename Scalar>
  VecX<Scalar> compress(const GradientVector<Scalar>& g, OpStats* ops = nullptr,
                        AllocStats* alloc = nullptr) const {
    if (g.dim() != spec_.input_dim) {
      throw DataError("compress: gradient dim " + std::to_string(g.dim()) +
                      " does not match compressor input dim " +
                      std::to_string(spec_.input_dim));
    }
    // Stage 0 sees the (possibly sparse) input; later stages run dense.
    VecX<Scalar> cur = run_stage(0, g, ops, alloc);
    for (size_t t = 1; t < spec_.pipeline.size(); ++t) {
      cur = run_stage(t, GradientVector<Scalar>::dense(cur), ops, alloc);
    }
    return cur;
  }

 private:
  template <typename Scalar>
  VecX<Scalar> run_stage(size_t t, const GradientVector<Scalar>& g, OpStats* ops,
                         AllocStats* alloc) const {
    if (stage_is_mask(spec_.pipeline[t].kind)) {
      return apply_mask(masks_[t], g, ops);
    }
    return sketch_project(sketches_[t], g, ops, alloc);
  }

  CompressorSpec spec_;
  std::vector<MaskSpec> masks_;       // parallel to pipeline; empty at non-mask stages
  std::vector<SketchSpec> sketches_;  // parallel to pipeline; empty at non-sketch stages
};

inline Compressor bind_compressor(const std::string& text, Index input_dim,
                                  const MaskLoader& load_mask = MaskLoader()) {
  return Compressor(parse_compressor(text), input_dim, load_mask);
}

}  // namespace grasskit
