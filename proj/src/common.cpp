#include "stagin/common.hpp"

#include <cstdio>

namespace stagin {

std::string fmt_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

}  // namespace stagin
