// The four MRI channels, in the fixed order used everywhere: concatenation,
// storage, and decoder routing all depend on it.
#pragma once

#include <array>

namespace mtseg {

enum class Modality : int { T1 = 0, T1Gd = 1, T2 = 2, Flair = 3 };

constexpr std::array<Modality, 4> kModalityOrder = {Modality::T1, Modality::T1Gd, Modality::T2,
                                                    Modality::Flair};

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::T1: return "t1";
    case Modality::T1Gd: return "t1gd";
    case Modality::T2: return "t2";
    case Modality::Flair: return "flair";
  }
  return "?";
}

}  // namespace mtseg
