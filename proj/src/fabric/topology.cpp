#include "mpr/fabric/topology.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include <fstream>
#include <optional>
#include <sstream>

namespace mpr::fabric {

namespace pt = boost::property_tree;

std::string_view to_string(LinkMode mode) {
    return mode == LinkMode::lossy ? "lossy" : "lossless";
}

LinkMode parse_link_mode(std::string_view text) {
    if (text == "lossless") return LinkMode::lossless;
    if (text == "lossy") return LinkMode::lossy;
    throw ConfigError(fmt::format("unknown link mode '{}'", text));
}

namespace {

double number(const pt::ptree& section, const std::string& section_name, const std::string& key,
              std::optional<double> fallback = std::nullopt) {
    auto value = section.get_optional<std::string>(key);
    if (!value) {
        if (fallback) return *fallback;
        throw ConfigError(fmt::format("[{}] missing key '{}'", section_name, key));
    }
    try {
        std::size_t used = 0;
        double parsed = std::stod(*value, &used);
        if (used != value->size()) throw std::invalid_argument("trailing characters");
        return parsed;
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("[{}] '{}' is not a number: '{}'", section_name, key, *value));
    }
}

LinkConfig read_link(const std::string& name, const pt::ptree& section, bool core) {
    LinkConfig link;
    link.id = name;
    link.rate = number(section, name, "rate");
    link.delay = number(section, name, "delay", 0.0);
    link.buffer = number(section, name, "buffer", 0.0);
    link.mode = parse_link_mode(section.get<std::string>("mode", "lossless"));
    if (core) {
        link.vp_a = section.get<std::string>("vp_a", "");
        link.vp_b = section.get<std::string>("vp_b", "");
        if (link.vp_a.empty() || link.vp_b.empty())
            throw ConfigError(fmt::format("[{}] core link needs vp_a and vp_b", name));
    }
    return link;
}

void write_link(std::ostream& out, const LinkConfig& link) {
    out << "[" << link.id << "]\n";
    out << fmt::format("rate = {}\n", link.rate);
    out << fmt::format("delay = {}\n", link.delay);
    out << fmt::format("buffer = {}\n", link.buffer);
    out << "mode = " << to_string(link.mode) << "\n";
    if (!link.vp_a.empty()) out << "vp_a = " << link.vp_a << "\nvp_b = " << link.vp_b << "\n";
    out << "\n";
}

}  // namespace

TopologyConfig TopologyConfig::reference(std::size_t paths, double core_rate, double edge_rate,
                                         LinkMode mode, double core_buffer) {
    TopologyConfig config;
    config.edge_a = LinkConfig{"edge_a", edge_rate, 0.0, core_buffer, mode, {}, {}};
    config.edge_b = LinkConfig{"edge_b", edge_rate, 0.0, core_buffer, mode, {}, {}};
    for (std::size_t i = 1; i <= paths; ++i) {
        config.cores.push_back(LinkConfig{fmt::format("core_{}", i), core_rate, 0.0, core_buffer,
                                          mode, fmt::format("10.0.{}.1", i),
                                          fmt::format("10.0.{}.2", i)});
    }
    return config;
}

TopologyConfig TopologyConfig::parse(std::string_view text) {
    // read_ini only understands whole-line comments; strip trailing ones too.
    std::string cleaned;
    std::istringstream lines{std::string(text)};
    for (std::string line; std::getline(lines, line);) {
        if (auto cut = line.find_first_of(";#"); cut != std::string::npos) line.erase(cut);
        cleaned += line;
        cleaned += '\n';
    }
    pt::ptree tree;
    std::istringstream in{cleaned};
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(fmt::format("topology config: {}", e.message()));
    }

    TopologyConfig config;
    bool have_a = false;
    bool have_b = false;
    for (const auto& [name, section] : tree) {
        if (name == "fabric") {
            auto model = section.get<std::string>("buffer_model", "dedicated");
            if (model == "dedicated") {
                config.buffer_model = BufferModel::dedicated;
            } else if (model == "shared") {
                config.buffer_model = BufferModel::shared;
            } else {
                throw ConfigError(fmt::format("[fabric] unknown buffer_model '{}'", model));
            }
            config.shared_buffer = number(section, name, "shared_buffer", 0.0);
            config.jitter = number(section, name, "jitter", 0.0);
            auto seed = section.get<std::string>("seed", "1");
            try {
                config.seed = std::stoull(seed);
            } catch (const std::exception&) {
                throw ConfigError(fmt::format("[fabric] seed is not an unsigned integer: '{}'", seed));
            }
            config.control_delay = number(section, name, "control_delay", 0.0);
        } else if (name == "edge_a") {
            config.edge_a = read_link(name, section, false);
            have_a = true;
        } else if (name == "edge_b") {
            config.edge_b = read_link(name, section, false);
            have_b = true;
        } else if (name.rfind("core", 0) == 0) {
            config.cores.push_back(read_link(name, section, true));
        } else {
            throw ConfigError(fmt::format("unknown section [{}]", name));
        }
    }
    if (!have_a || !have_b) throw ConfigError("topology config needs [edge_a] and [edge_b]");
    return config;
}

TopologyConfig TopologyConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("cannot open topology config '{}'", path.string()));
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str());
}

std::string TopologyConfig::to_text() const {
    std::ostringstream out;
    out << "[fabric]\n";
    out << "buffer_model = " << (buffer_model == BufferModel::shared ? "shared" : "dedicated") << "\n";
    out << fmt::format("shared_buffer = {}\n", shared_buffer);
    out << fmt::format("jitter = {}\n", jitter);
    out << "seed = " << seed << "\n";
    out << fmt::format("control_delay = {}\n\n", control_delay);
    write_link(out, edge_a);
    write_link(out, edge_b);
    for (const auto& core : cores) write_link(out, core);
    return out.str();
}

}  // namespace mpr::fabric
