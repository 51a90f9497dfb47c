#include "drpca/tensor.hpp"

#include <sstream>

namespace drpca {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << '[' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ']';
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape " + to_string(a) + " vs " + to_string(b));
}

}  // namespace drpca
