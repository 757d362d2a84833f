#include "mmsteer/common.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>

namespace mms {

const char* kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::Degenerate: return "degenerate_input";
        case ErrorKind::Usage: return "usage";
        case ErrorKind::Contract: return "contract";
        case ErrorKind::Config: return "config";
        case ErrorKind::Range: return "range";
        case ErrorKind::TrainingFailure: return "training_failure";
        case ErrorKind::Compatibility: return "compatibility";
        case ErrorKind::Io: return "io";
        case ErrorKind::Numeric: return "numeric";
        case ErrorKind::Parse: return "parse";
    }
    return "unknown";
}

const char* mod_name(int m) {
    static const char* names[] = {"T", "A", "V"};
    if (m < 0 || m >= kMods) throw Error(ErrorKind::Range, "bad modality index");
    return names[m];
}

int mod_from_name(std::string_view s) {
    if (s == "T") return T;
    if (s == "A") return A;
    if (s == "V") return V;
    throw Error(ErrorKind::Parse, "unknown modality '" + std::string(s) + "'");
}

int count_avail(const Avail& a) { return int(a[0]) + int(a[1]) + int(a[2]); }

uint64_t fnv1a(std::string_view bytes, uint64_t h) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string fmt_num(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    if (x == 0.0) x = 0.0;  // drop negative zero
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

double round_to(double x, int d) {
    double s = std::pow(10.0, d);
    double r = std::nearbyint(x * s) / s;
    return r == 0.0 ? 0.0 : r;
}

}  // namespace mms
