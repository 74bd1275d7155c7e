// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace t3d {

/// Error categories raised across the library. Callers branch on `code()`,
/// the CLI maps them onto process exit codes.
enum class Errc {
  invalid_window,
  invalid_spacing,
  invalid_dims,
  crop_too_large,
  spec,
  format,
  io,
  config,
  shape,
  precondition,
  vocab,
  degenerate_norm,
  degenerate_attention,
  diverged,
  refuse_to_resume,
  prompt,
  degenerate_labels,
  auc_undefined,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_window: return "invalid-window";
    case Errc::invalid_spacing: return "invalid-spacing";
    case Errc::invalid_dims: return "invalid-dims";
    case Errc::crop_too_large: return "crop-too-large";
    case Errc::spec: return "spec";
    case Errc::format: return "format";
    case Errc::io: return "io";
    case Errc::config: return "config";
    case Errc::shape: return "shape";
    case Errc::precondition: return "precondition";
    case Errc::vocab: return "vocab";
    case Errc::degenerate_norm: return "degenerate-norm";
    case Errc::degenerate_attention: return "degenerate-attention";
    case Errc::diverged: return "diverged";
    case Errc::refuse_to_resume: return "refuse-to-resume";
    case Errc::prompt: return "prompt";
    case Errc::degenerate_labels: return "degenerate-labels";
    case Errc::auc_undefined: return "auc-undefined";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + " error: " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// Raised when a training step produces a non-finite loss.
class DivergedError : public Error {
 public:
  DivergedError(std::int64_t step, const std::string& what)
      : Error(Errc::diverged, "step " + std::to_string(step) + ": " + what), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace t3d
