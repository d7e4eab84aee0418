#include "p2p/common.hpp"

#include <bit>
#include <fstream>

namespace p2p {

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open file: ", path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) fail("error reading file: ", path);
    return bytes;
}

void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open file for writing: ", path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("error writing file: ", path);
}

uint32_t file_crc32(const std::string& path) { return crc32_of(read_file(path)); }

}  // namespace p2p
