#ifndef TRANSFLOWER_ERRORS_HPP
#define TRANSFLOWER_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace transflower {

/// Malformed input file (bad header, wrong column count, unparsable number).
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Well-formed input that violates a domain invariant.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not agree.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered in a forward pass, gradient or update.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint could not be decoded.
class CheckpointError : public std::runtime_error {
public:
    enum class Kind { format, version, checksum, truncated };

    CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

}  // namespace transflower

#endif  // TRANSFLOWER_ERRORS_HPP
