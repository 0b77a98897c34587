#include <cstdio>

int main() {
  std::puts("minitown cli: subcommands not wired yet");
  return 0;
}
