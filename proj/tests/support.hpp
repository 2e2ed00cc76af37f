#pragma once

#include <gtest/gtest.h>

#include "common.hpp"

namespace mspm::testing {

inline void expect_pass(const GradCheckReport& r, const std::string& what) {
  EXPECT_TRUE(r.passed()) << what << "\n" << describe(r);
  for (const auto& e : r.entries) EXPECT_GT(e.checked, 0u) << what << " " << e.name;
}

}  // namespace mspm::testing
