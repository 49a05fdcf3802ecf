#pragma once

#include <stdexcept>
#include <string>

namespace metamat {

struct RetryBudgetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SingularSystemError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyDesignError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateChannelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values during training or sampling; carries the reverse step
// index when raised from the sampler.
struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg, int step = -1)
        : std::runtime_error(msg), step_index(step) {}
    int step_index;
};

struct UndefinedMetricError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptRecordError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace metamat
