#pragma once
// Shared assemblies for the test executables, cached on disk under the build tree.

#include "kboltz/collision.hpp"

#include <map>
#include <string>

namespace kboltz::testing {

inline std::string cache_path(int nv, double V, const KernelParams& p = {}) {
    return std::string(KBOLTZ_CACHE_DIR) + "/K_nv" + std::to_string(nv) + "_V" + std::to_string(int(V)) + "_g" +
           std::to_string(int(p.gamma * 100)) + "_w" + std::to_string(p.n_polar) + "x" +
           std::to_string(p.n_azimuth) + ".bin";
}

inline const CollisionAssembly& assembly(int nv, double V) {
    static std::map<std::pair<int, double>, CollisionAssembly> pool;
    auto it = pool.find({nv, V});
    if (it == pool.end()) {
        const auto g = build_grid(V, nv);
        it = pool.emplace(std::pair{nv, V}, load_or_assemble(cache_path(nv, V), g, {})).first;
    }
    return it->second;
}

}  // namespace kboltz::testing
