#include <cstdio>
int main(){ std::puts("toxlab"); return 0; }
