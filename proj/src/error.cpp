#include "lvlm/error.hpp"

namespace lvlm {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::shape: return "shape";
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::unknown_class: return "unknown_class";
    case Errc::bad_template: return "bad_template";
    case Errc::missing_entry: return "missing_entry";
    case Errc::dim_mismatch: return "dim_mismatch";
    case Errc::schema_mismatch: return "schema_mismatch";
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad_magic";
    case Errc::bad_version: return "bad_version";
    case Errc::bad_dtype: return "bad_dtype";
    case Errc::truncated: return "truncated";
    case Errc::duplicate_name: return "duplicate_name";
    case Errc::length_mismatch: return "length_mismatch";
    case Errc::out_of_range: return "out_of_range";
    case Errc::numeric: return "numeric";
  }
  return "unknown";
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::io:
    case Errc::bad_magic:
    case Errc::bad_version:
    case Errc::bad_dtype:
    case Errc::truncated:
    case Errc::length_mismatch:
    case Errc::out_of_range:
      return 3;
    case Errc::numeric:
      return 4;
    default:
      return 2;
  }
}

void fail(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace lvlm
