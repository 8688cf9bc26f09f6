// Copyright 2026 The cfdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cfdp {

enum class ErrorKind {
  // file / data errors
  BadMagic,
  UnsupportedVersion,
  TruncatedPayload,
  NonFiniteData,
  IoFailure,
  MalformedPlan,
  // argument errors
  IndexOutOfRange,
  InvalidSigma,
  InvalidSize,
  InvalidArgument,
  // invariant errors
  DegeneratePlan,
  InvariantViolation,
  PlanMismatch,
  EmptySavedSet,
  ShapeMismatch,
  DivergedLoss,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::TruncatedPayload: return "TruncatedPayload";
    case ErrorKind::NonFiniteData: return "NonFiniteData";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::MalformedPlan: return "MalformedPlan";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::InvalidSigma: return "InvalidSigma";
    case ErrorKind::InvalidSize: return "InvalidSize";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::DegeneratePlan: return "DegeneratePlan";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::PlanMismatch: return "PlanMismatch";
    case ErrorKind::EmptySavedSet: return "EmptySavedSet";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DivergedLoss: return "DivergedLoss";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the ErrorKind tags so
/// callers (the CLI in particular) can map it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// True for errors caused by bad input files or documents.
constexpr bool is_data_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::BadMagic:
    case ErrorKind::UnsupportedVersion:
    case ErrorKind::TruncatedPayload:
    case ErrorKind::NonFiniteData:
    case ErrorKind::IoFailure:
    case ErrorKind::MalformedPlan:
      return true;
    default:
      return false;
  }
}

/// True for errors caused by bad arguments rather than bad data.
constexpr bool is_usage_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::IndexOutOfRange:
    case ErrorKind::InvalidSigma:
    case ErrorKind::InvalidSize:
    case ErrorKind::InvalidArgument:
      return true;
    default:
      return false;
  }
}

}  // namespace cfdp
