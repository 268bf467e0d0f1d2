#pragma once

#include <stdexcept>
#include <string>

namespace qac {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public Error { using Error::Error; };
class EmptyCorpusError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class DimensionError : public Error { using Error::Error; };
class LookupError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };
class UnavailableError : public Error { using Error::Error; };

// Archive corruption (bad magic, truncation, checksum mismatch).
class FormatError : public Error { using Error::Error; };
class ChecksumError : public FormatError { using FormatError::FormatError; };
class VersionError : public FormatError { using FormatError::FormatError; };

}  // namespace qac
