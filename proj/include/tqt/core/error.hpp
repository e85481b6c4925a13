// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tqt {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  /// Short machine-readable category, printed by the CLI on failure.
  virtual const char* kind() const noexcept { return "error"; }
};

#define TQT_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(what) {}          \
    const char* kind() const noexcept override { return tag; }       \
  };

TQT_DEFINE_ERROR(DimensionError, "dimension")
TQT_DEFINE_ERROR(ContractError, "contract")
TQT_DEFINE_ERROR(ParseError, "parse")
TQT_DEFINE_ERROR(TransformError, "transform")
TQT_DEFINE_ERROR(TrainingError, "training")
TQT_DEFINE_ERROR(OverflowError, "overflow")
TQT_DEFINE_ERROR(IoError, "io")
TQT_DEFINE_ERROR(InternalError, "internal")

#undef TQT_DEFINE_ERROR

}  // namespace tqt
