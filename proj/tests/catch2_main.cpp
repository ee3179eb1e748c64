// Compile the amalgamated test framework once; provides main() for every
// unit test binary.
#include <catch2/catch_amalgamated.cpp>
