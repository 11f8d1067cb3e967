#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace crowdflow {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TruncatedFile : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace binio {

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T)))
        throw TruncatedFile(std::string("unexpected end of file reading ") + what);
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    }
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

inline void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[4], const char* format_name) {
    char got[4];
    if (!is.read(got, 4)) throw TruncatedFile(std::string("file too short for ") + format_name + " magic");
    if (std::memcmp(got, magic, 4) != 0)
        throw FormatError(std::string("bad magic, not a ") + format_name + " file");
}

}  // namespace binio
}  // namespace crowdflow
