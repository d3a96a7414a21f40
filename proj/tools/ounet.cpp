#include <cstdio>

int main() {
    std::puts("ounet: command surface under construction");
    return 1;
}
