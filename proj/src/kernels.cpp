#include "projprobe/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace projprobe::kernels {

namespace {

Isa select_isa() {
    if (const char* env = std::getenv("PROJPROBE_KERNELS")) {
        if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
        if (std::strcmp(env, "avx2") == 0 && avx2_available()) return Isa::avx2;
    }
    return avx2_available() ? Isa::avx2 : Isa::scalar;
}

}  // namespace

Isa active_isa() {
    static const Isa isa = select_isa();
    return isa;
}

const Ops& active() {
    return active_isa() == Isa::avx2 ? avx2_ops() : scalar_ops();
}

std::string isa_name(Isa isa) {
    return isa == Isa::avx2 ? "avx2" : "scalar";
}

}  // namespace projprobe::kernels
