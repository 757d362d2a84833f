#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsteer/common.hpp"
#include "mmsteer/tensor.hpp"

namespace mms {

// ---- five-class labels
constexpr int kClasses = 5;
enum Label : int { N = 0, WN = 1, Neu = 2, WP = 3, P = 4 };
enum class Scheme { CHSIMS, MOSI };

const char* label_name(int y);
int label_from_name(std::string_view s);
int polarity(int y);  // -1, 0, +1
const char* scheme_name(Scheme s);
Scheme scheme_from_name(std::string_view s);
// grid points (multiples of 0.2) that belong to class y
std::vector<double> score_grid(int y, Scheme s);
int map_score(double score, Scheme s);
// midpoint of the class grid, used for MAE
double representative_score(int y, Scheme s);

enum class Subset { Align, Conflict, MissingAlign, MissingConflict };
enum class Split { Pretrain, Train, Valid, Test, None };
const char* subset_name(Subset s);
Subset subset_from_name(std::string_view s);
const char* split_name(Split s);
Split split_from_name(std::string_view s);
bool is_missing(Subset s);

struct Sample {
    std::string id;
    std::string group_id;
    Avail avail{true, true, true};
    // n_m x F per modality; shared between a full sample and its masked copies
    std::array<std::shared_ptr<const Tensor>, kMods> tokens;
    std::array<std::vector<int>, kMods> informative;
    std::array<double, kMods> score{0, 0, 0};
    double score_gt = 0.0;
    std::array<int, kMods> y{2, 2, 2};
    int y_gt = 2;
    Subset subset = Subset::Align;
    Split split = Split::None;
    Scheme scheme = Scheme::CHSIMS;

    std::size_t count(int m) const { return avail[m] && tokens[m] ? tokens[m]->rows() : 0; }
};

struct GeneratorConfig {
    int n_groups = 4000;
    int n_pretrain = 3000;
    std::array<double, kClasses> class_prior{0.2, 0.2, 0.2, 0.2, 0.2};
    double conflict_rate = 0.5;
    double single_frac = 0.8;  // share of conflict samples with exactly one flipped modality
    std::array<double, kMods> flip_dist{0.45, 0.10, 0.45};
    double intensity_jitter = 0.15;  // chance one agreeing modality shifts N<->WN or P<->WP
    int feat_dim = 16;
    int n_T = 12, n_A = 12, n_V = 64;
    double rho = 0.75;
    std::array<double, kMods> noise{1.2, 1.35, 1.35};
    double bg_noise = 1.0;
    double r_weak = 1.0, r_strong = 2.0, r_neutral = 1.2;
    double signature_norm = 1.0;
    int decimals = 4;
    Scheme scheme = Scheme::CHSIMS;
    uint64_t seed = 1;

    void validate() const;
    int n_informative() const;
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

// class centers live in one token space shared by all modalities; each modality
// adds its own fixed signature offset
struct World {
    std::vector<double> axis, neutral;
    std::array<std::vector<double>, kMods> signature;
    World(const GeneratorConfig& c, Rng& rng);
    std::vector<double> center(const GeneratorConfig& c, int m, int y) const;
};

class Generator {
public:
    explicit Generator(GeneratorConfig c);
    // full-modality benchmark samples, tagged Align/Conflict
    std::vector<Sample> generate();
    // aligned-only corpus from the same world, for backbone pretraining
    std::vector<Sample> pretrain_corpus();
    Sample draw(Rng& rng, double conflict_rate, const std::string& id);
    const GeneratorConfig& config() const { return c_; }
    const World& world() const { return world_; }

private:
    GeneratorConfig c_;
    Rng wrng_;
    World world_;
};

Subset partition(const Sample& s);
void partition(std::vector<Sample>& ds);
std::vector<Sample> expand_missing(const std::vector<Sample>& full);
// 7:1:2 by group, stratified by the ground-truth class
void split(std::vector<Sample>& ds, uint64_t seed);

struct Dataset {
    GeneratorConfig config;
    std::vector<Sample> samples;

    std::vector<const Sample*> select(Split sp) const;
    std::vector<const Sample*> select(Split sp, Subset sub) const;
};

// pretrain corpus + split full samples + their masked copies
Dataset build_benchmark(const GeneratorConfig& c);

void write_dataset(const Dataset& d, const std::string& path);
Dataset read_dataset(const std::string& path);
std::string sample_to_json_line(const Sample& s);

}  // namespace mms
