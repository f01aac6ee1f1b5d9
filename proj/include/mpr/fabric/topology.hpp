#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mpr::fabric {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class LinkMode { lossless, lossy };

/// How core-link egress queues at the sending ToR draw on buffer memory.
/// `dedicated`: each core link owns its configured buffer.
/// `shared`: all core links drain one pool of `shared_buffer` bytes, so
/// bursts admitted at the same instant compete for it.
enum class BufferModel { dedicated, shared };

std::string_view to_string(LinkMode mode);
LinkMode parse_link_mode(std::string_view text);

struct LinkConfig {
    std::string id;
    double rate = 0.0;        // bytes per second
    double delay = 0.0;       // seconds
    double buffer = 0.0;      // bytes
    LinkMode mode = LinkMode::lossless;
    // Core links only: the vNIC address on each host that pins a QP to this link.
    std::string vp_a;
    std::string vp_b;
};

/// Two hosts, two ToRs, one edge link per host and n parallel core links.
///
/// Text form (INI-style, one section per link):
///
///     [fabric]
///     buffer_model = dedicated     ; or shared
///     shared_buffer = 0            ; bytes, shared model only
///     jitter = 0                   ; max extra delivery delay, seconds
///     seed = 1
///     control_delay = 0            ; control-channel latency, seconds
///
///     [edge_a]                     ; host A <-> ToR A
///     rate = 10e9
///     delay = 0
///     buffer = 1048576
///     mode = lossless
///
///     [edge_b]                     ; ToR B <-> host B
///     ...
///
///     [core_1]                     ; any section whose name starts with "core"
///     rate = 1e9
///     delay = 0
///     buffer = 700000
///     mode = lossy
///     vp_a = 10.0.1.1
///     vp_b = 10.0.1.2
///
/// Core links keep the order in which they appear in the file.
struct TopologyConfig {
    LinkConfig edge_a;
    LinkConfig edge_b;
    std::vector<LinkConfig> cores;

    BufferModel buffer_model = BufferModel::dedicated;
    double shared_buffer = 0.0;
    double jitter = 0.0;
    std::uint64_t seed = 1;
    double control_delay = 0.0;

    /// Leaf-spine pair with `paths` identical core links. vNIC addresses are
    /// 10.0.<i>.1 on host A and 10.0.<i>.2 on host B, i counting from 1.
    static TopologyConfig reference(std::size_t paths, double core_rate, double edge_rate,
                                    LinkMode mode = LinkMode::lossless,
                                    double core_buffer = 1 << 20);

    static TopologyConfig parse(std::string_view text);
    static TopologyConfig load(const std::filesystem::path& path);

    std::string to_text() const;
};

}  // namespace mpr::fabric
