#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mms {

enum class ErrorKind {
    Dimension,
    Degenerate,
    Usage,
    Contract,
    Config,
    Range,
    TrainingFailure,
    Compatibility,
    Io,
    Numeric,
    Parse,
};

const char* kind_name(ErrorKind k);

class Error : public std::runtime_error {
public:
    Error(ErrorKind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

// modality order is fixed everywhere: text, audio, video
enum Modality : int { T = 0, A = 1, V = 2 };
constexpr int kMods = 3;
using Avail = std::array<bool, kMods>;

const char* mod_name(int m);
int mod_from_name(std::string_view s);
int count_avail(const Avail& a);

uint64_t fnv1a(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(uint64_t h);

// shortest text that parses back to the same double
std::string fmt_num(double x);
// round to d decimals, used so that stored token values survive a text round trip
double round_to(double x, int d);

// one generator type for the whole project so seeded runs stay reproducible
class Rng {
public:
    explicit Rng(uint64_t seed) : e_(seed) {}
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(e_); }
    double normal() { return nd_(e_); }
    int below(int n) { return std::uniform_int_distribution<int>(0, n - 1)(e_); }
    template <class It>
    void shuffle(It a, It b) {
        std::shuffle(a, b, e_);
    }
    uint64_t next() { return e_(); }

private:
    std::mt19937_64 e_;
    std::normal_distribution<double> nd_{0.0, 1.0};
};

}  // namespace mms
