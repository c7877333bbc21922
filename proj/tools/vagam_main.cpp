#include <cstdio>

int main() {
    std::puts("vagam: command-line interface under construction");
    return 1;
}
