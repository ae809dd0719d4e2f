#include <gtest/gtest.h>
TEST(Acceptance, PlaceholderUntilSuiteLands) {}
