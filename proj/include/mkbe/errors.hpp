#pragma once

#include <stdexcept>
#include <string>

namespace mkbe {

/// Bad or missing user input: files, config, flags. The CLI exits with 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unusable persisted state: corrupt checkpoint or KB, missing run artifacts.
/// The CLI exits with 3.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mkbe
