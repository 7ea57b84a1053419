#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>

namespace tensornet {

inline constexpr std::array<std::string_view, 119> element_symbols = {
    "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si",
    "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru",
    "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr",
    "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",
    "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac",
    "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf",
    "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

inline constexpr int max_known_element = 118;

inline std::optional<int> atomic_number_of(std::string_view symbol) {
  for (int z = 1; z <= max_known_element; ++z)
    if (element_symbols[z] == symbol)
      return z;
  return std::nullopt;
}

// Symbol for known elements, "Z=<n>" otherwise.
inline std::string element_name(int z) {
  if (z >= 1 && z <= max_known_element)
    return std::string(element_symbols[z]);
  return "Z=" + std::to_string(z);
}

} // namespace tensornet
