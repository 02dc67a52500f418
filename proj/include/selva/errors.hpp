#pragma once
#include <stdexcept>
#include <string>

namespace selva {

// Error taxonomy. The CLI maps these onto exit codes:
// usage-class -> 2, I/O -> 3, numeric/construction -> 4.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct VocabError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct WorldError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BenchmarkError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace selva
