#include <cstdio>

int main() {
    std::printf("argen: subcommands not wired up yet\n");
    return 0;
}
