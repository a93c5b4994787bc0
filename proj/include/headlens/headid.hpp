#pragma once

#include <compare>
#include <vector>

namespace headlens::heads {

struct HeadId {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadId &) const = default;
};

}  // namespace headlens::heads
