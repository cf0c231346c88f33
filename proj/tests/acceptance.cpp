// Acceptance suite: one pass/fail line per criterion.
// Usage: dfn_acceptance <path-to-dfn-cli> <work-dir> [--quick]

#include <cstdio>

int main() {
  std::printf("acceptance suite placeholder\n");
  return 1;
}
