#pragma once

#include <stdexcept>
#include <string>

namespace p2ilf {

// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or inconsistent input data (bad files, mismatched sizes, invalid
// indices). CLI maps these to exit code 2.
class DataError : public Error {
public:
    using Error::Error;
};

// An algorithm failed on valid input (no convergence, nothing visible, no
// consensus model). CLI maps these to exit code 3.
class AlgorithmError : public Error {
public:
    using Error::Error;
};

class ParseError : public DataError {
public:
    using DataError::DataError;
};

class MissingAsset : public DataError {
public:
    using DataError::DataError;
};

class DimensionMismatch : public DataError {
public:
    using DataError::DataError;
};

class IndexMismatch : public DataError {
public:
    using DataError::DataError;
};

class ConnectivityMismatch : public DataError {
public:
    using DataError::DataError;
};

class DegenerateExtent : public DataError {
public:
    using DataError::DataError;
};

class NonPositiveDenominator : public DataError {
public:
    using DataError::DataError;
};

class EmptySetError : public DataError {
public:
    using DataError::DataError;
};

class MissingCanonicalPose : public DataError {
public:
    using DataError::DataError;
};

class NonPositiveDepth : public AlgorithmError {
public:
    using AlgorithmError::AlgorithmError;
};

class NoConvergence : public AlgorithmError {
public:
    using AlgorithmError::AlgorithmError;
};

class EmptyProjection : public AlgorithmError {
public:
    using AlgorithmError::AlgorithmError;
};

class DegenerateConfiguration : public AlgorithmError {
public:
    using AlgorithmError::AlgorithmError;
};

class NoModelFound : public AlgorithmError {
public:
    using AlgorithmError::AlgorithmError;
};

class AllRestartsFailed : public AlgorithmError {
public:
    using AlgorithmError::AlgorithmError;
};

} // namespace p2ilf
