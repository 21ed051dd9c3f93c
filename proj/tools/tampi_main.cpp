#include <cstdio>

int main() {
  std::puts("tampi: subcommands not wired yet");
  return 2;
}
