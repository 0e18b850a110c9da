#include "projprobe/dataset.hpp"

#include <algorithm>

#include "projprobe/rng.hpp"

namespace projprobe {

namespace {

constexpr double kColorRgb[kNumColors][3] = {
    {0.90, 0.10, 0.10},  // red
    {0.10, 0.90, 0.10},  // green
    {0.10, 0.10, 0.90},  // blue
    {0.90, 0.90, 0.10},  // yellow
    {0.90, 0.10, 0.90},  // magenta
    {0.10, 0.90, 0.90},  // cyan
    {0.90, 0.50, 0.10},  // orange
    {0.90, 0.90, 0.90},  // white
};

constexpr const char* kColorNames[kNumColors] = {"red",     "green", "blue", "yellow",
                                                 "magenta", "cyan",  "orange", "white"};

constexpr int kCellGrid = 4;  // 4x4 cells, one encoder patch each

struct Scene {
    std::vector<std::pair<int, int>> cells;  // (cell index, color id)
};

std::vector<double> render(const Scene& scene, int image_size, Rng& rng) {
    const int hw = image_size * image_size;
    std::vector<double> px(3 * static_cast<std::size_t>(hw));
    for (int i = 0; i < hw; ++i) {
        const double base = 0.08 + rng.uniform(0.0, 0.04);
        px[i] = base;
        px[hw + i] = base;
        px[2 * hw + i] = base;
    }
    const int cell = image_size / kCellGrid;
    for (const auto& [idx, color] : scene.cells) {
        const int cy = (idx / kCellGrid) * cell, cx = (idx % kCellGrid) * cell;
        for (int c = 0; c < 3; ++c)
            for (int y = cy; y < cy + cell; ++y)
                for (int x = cx; x < cx + cell; ++x)
                    px[c * hw + y * image_size + x] = kColorRgb[color][c] + rng.uniform(-0.03, 0.03);
    }
    for (double& v : px) v = std::clamp(v, 0.0, 1.0);
    return px;
}

std::vector<int> pick_cells(int k, Rng& rng) {
    std::vector<int> all(kCellGrid * kCellGrid);
    for (int i = 0; i < static_cast<int>(all.size()); ++i) all[i] = i;
    rng.shuffle(all.begin(), all.end());
    all.resize(k);
    return all;
}

}  // namespace

std::string answer_name(int id) {
    if (id >= 0 && id < kNumColors) return kColorNames[id];
    if (id >= kAnswerCountBase && id < kAnswerCountBase + 6)
        return std::to_string(id - kAnswerCountBase + 1);
    if (id == kAnswerYes) return "yes";
    if (id == kAnswerNo) return "no";
    return "?";
}

SyntheticVQADataset make_synthetic_vqa(std::uint64_t seed, int n, int image_size) {
    if (n < 1) throw ValidationError("make_synthetic_vqa: n must be >= 1");
    if (image_size % kCellGrid != 0)
        throw ConfigError("make_synthetic_vqa: image size must be divisible by the cell grid");

    Rng rng(seed_split(seed, "synthetic-vqa"));
    // exact cycling keeps every answer class within one count of n/16
    std::vector<int> answers(n);
    for (int i = 0; i < n; ++i) answers[i] = i % kNumAnswers;
    rng.shuffle(answers.begin(), answers.end());

    SyntheticVQADataset ds;
    ds.seed = seed;
    ds.image_size = image_size;
    ds.items.reserve(n);

    for (int i = 0; i < n; ++i) {
        const int answer = answers[i];
        VQAItem item;
        item.answer_id = answer;
        item.question_id = i;
        Scene scene;
        if (answer < kNumColors) {
            // "what color are the shapes?" -- all shapes share the answer color
            const int k = rng.uniform_int(1, 4);
            for (int cell : pick_cells(k, rng)) scene.cells.push_back({cell, answer});
            item.instr_tokens = {kTokColorQ, kTokPad, kTokPad};
        } else if (answer < kAnswerCountBase + 6) {
            // "how many shapes?"
            const int k = answer - kAnswerCountBase + 1;
            const int color = rng.uniform_int(0, kNumColors - 1);
            for (int cell : pick_cells(k, rng)) scene.cells.push_back({cell, color});
            item.instr_tokens = {kTokCountQ, kTokPad, kTokPad};
        } else {
            // "is there a <color> shape?"
            const int asked = rng.uniform_int(0, kNumColors - 1);
            const int k = rng.uniform_int(1, 4);
            int color;
            if (answer == kAnswerYes) {
                color = asked;
            } else {
                do { color = rng.uniform_int(0, kNumColors - 1); } while (color == asked);
            }
            for (int cell : pick_cells(k, rng)) scene.cells.push_back({cell, color});
            item.instr_tokens = {kTokPresentQ, kTokColorArgBase + asked, kTokPad};
        }
        item.pixels = render(scene, image_size, rng);
        ds.items.push_back(std::move(item));
    }
    return ds;
}

std::vector<const VQAItem*> SyntheticVQADataset::train_split(double train_frac) const {
    const int cut = static_cast<int>(items.size() * train_frac);
    std::vector<const VQAItem*> out;
    for (int i = 0; i < cut; ++i) out.push_back(&items[i]);
    return out;
}

std::vector<const VQAItem*> SyntheticVQADataset::eval_split(double train_frac) const {
    const int cut = static_cast<int>(items.size() * train_frac);
    std::vector<const VQAItem*> out;
    for (std::size_t i = cut; i < items.size(); ++i) out.push_back(&items[i]);
    return out;
}

ImageBatch to_image_batch(const std::vector<const VQAItem*>& items, int image_size) {
    ImageBatch b;
    b.batch = static_cast<int>(items.size());
    b.height = b.width = image_size;
    b.pixels.reserve(b.batch * b.item_size());
    for (const VQAItem* it : items)
        b.pixels.insert(b.pixels.end(), it->pixels.begin(), it->pixels.end());
    return b;
}

ImageBatch to_image_batch(const VQAItem& item, int image_size) {
    return to_image_batch(std::vector<const VQAItem*>{&item}, image_size);
}

}  // namespace projprobe
