#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lvlm {

/// Error categories. Each maps onto one of the CLI exit codes.
enum class Errc {
  shape,             // tensor shape contract violated
  invalid_argument,  // bad value or configuration
  unknown_class,
  bad_template,
  missing_entry,     // named tensor or class entry absent
  dim_mismatch,
  schema_mismatch,
  io,                // file cannot be opened/read/written
  bad_magic,
  bad_version,
  bad_dtype,
  truncated,
  duplicate_name,
  length_mismatch,   // slice file of the wrong size
  out_of_range,      // pixel value outside [0, 1]
  numeric,           // NaN/Inf during training
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message) : std::runtime_error(message), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

/// 2 usage/config, 3 I/O, 4 numeric.
int exit_code_for(Errc code);

[[noreturn]] void fail(Errc code, const std::string& message);

}  // namespace lvlm
