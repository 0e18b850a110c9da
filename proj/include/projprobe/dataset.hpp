#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "projprobe/models.hpp"

namespace projprobe {

// Answer vocabulary (16 ids): 8 colors, counts 1..6, yes, no.
inline constexpr int kNumAnswers = 16;
inline constexpr int kNumColors = 8;
inline constexpr int kAnswerCountBase = 8;   // ids 8..13 = counts 1..6
inline constexpr int kAnswerYes = 14;
inline constexpr int kAnswerNo = 15;

// Question token vocabulary: PAD, three question types, 8 color arguments.
inline constexpr int kTokPad = 0;
inline constexpr int kTokColorQ = 1;
inline constexpr int kTokCountQ = 2;
inline constexpr int kTokPresentQ = 3;
inline constexpr int kTokColorArgBase = 4;   // 4..11
inline constexpr int kQuestionVocab = 16;
inline constexpr int kInstrLen = 3;

std::string answer_name(int id);

struct VQAItem {
    std::vector<double> pixels;     // channels*h*w, CHW
    std::vector<int> instr_tokens;  // kInstrLen ids
    int answer_id = 0;
    int question_id = 0;
};

struct SyntheticVQADataset {
    std::uint64_t seed = 0;
    int image_size = 32;
    std::vector<VQAItem> items;

    // contiguous split: first train_frac of items train, rest held out
    std::vector<const VQAItem*> train_split(double train_frac) const;
    std::vector<const VQAItem*> eval_split(double train_frac) const;
};

// Colored squares on a cell grid; questions are color / count / presence
// templates; answer ids are cycled before shuffling so every class appears
// within one count of n/16.
SyntheticVQADataset make_synthetic_vqa(std::uint64_t seed, int n, int image_size = 32);

ImageBatch to_image_batch(const std::vector<const VQAItem*>& items, int image_size);
ImageBatch to_image_batch(const VQAItem& item, int image_size);

}  // namespace projprobe
