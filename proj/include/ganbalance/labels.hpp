#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ganbalance {

enum class ClassLabel : int {
  Pneumothorax = 0,
  PulmonaryEdema = 1,
  PleuralEffusion = 2,
  Normal = 3,
  Cardiomegaly = 4,
};

inline constexpr std::size_t kNumClasses = 5;

inline constexpr std::array<ClassLabel, kNumClasses> kAllClasses{
    ClassLabel::Pneumothorax, ClassLabel::PulmonaryEdema, ClassLabel::PleuralEffusion, ClassLabel::Normal,
    ClassLabel::Cardiomegaly};

constexpr int code(ClassLabel c) { return static_cast<int>(c); }

inline ClassLabel label_from_code(int code) {
  if (code < 0 || code >= static_cast<int>(kNumClasses))
    throw std::out_of_range("class code out of range: " + std::to_string(code));
  return static_cast<ClassLabel>(code);
}

/// Identifier form, also used as the class directory name.
constexpr std::string_view name(ClassLabel c) {
  constexpr std::array<std::string_view, kNumClasses> names{"Pneumothorax", "PulmonaryEdema", "PleuralEffusion",
                                                            "Normal", "Cardiomegaly"};
  return names[static_cast<std::size_t>(c)];
}

constexpr std::string_view display_name(ClassLabel c) {
  constexpr std::array<std::string_view, kNumClasses> names{"Pneumothorax", "Pulmonary Edema", "Pleural Effusion",
                                                            "Normal", "Cardiomegaly"};
  return names[static_cast<std::size_t>(c)];
}

/// Accepts either the identifier or the display form.
inline std::optional<ClassLabel> parse_label(std::string_view s) {
  for (auto c : kAllClasses)
    if (s == name(c) || s == display_name(c)) return c;
  return std::nullopt;
}

}  // namespace ganbalance
