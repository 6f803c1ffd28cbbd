#pragma once

#include <stdexcept>
#include <string>

namespace matchrec {

/// Bad or unreadable input: files, JSON, configuration values. CLI exit code 2.
class InputError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Shape-pipeline, checkpoint or numerical failure inside the model. CLI exit code 3.
class ModelError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace matchrec
