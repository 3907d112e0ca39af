#include <cstdio>

int main() {
    std::printf("pseudo3d: command line not wired up yet\n");
    return 1;
}
