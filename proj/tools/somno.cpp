#include <cstdio>

#include "somno/common.hpp"

int main() {
  std::printf("somno %s\n", somno::kVersion);
  return 0;
}
