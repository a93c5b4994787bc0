#include "headlens/lahis.hpp"

#include <cstring>

namespace headlens::lahis {

std::string matrix_fingerprint(const ImportanceMatrix &m) {
    uint64_t h = fnv1a("importance");
    auto mix = [&h](uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            const char byte = static_cast<char>((v >> (8 * b)) & 0xff);
            h = fnv1a(std::string_view(&byte, 1), h);
        }
    };
    mix(static_cast<uint64_t>(m.language_id));
    mix(static_cast<uint64_t>(m.kind));
    mix(static_cast<uint64_t>(m.n_samples));
    for (double v : m.scores) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        mix(bits);
    }
    return to_hex(h);
}

}  // namespace headlens::lahis
