// CLI entry point; subcommands land here as the library fills out.
#include <iostream>

int main() {
  std::cerr << "slufuse: not wired up yet\n";
  return 2;
}
