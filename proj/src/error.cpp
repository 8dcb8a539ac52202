#include "pdlatent/error.hpp"

namespace pdlatent {

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config:
      return 1;
    case ErrorKind::Data:
      return 2;
    case ErrorKind::Numeric:
      return 3;
  }
  return 2;
}

}  // namespace pdlatent
