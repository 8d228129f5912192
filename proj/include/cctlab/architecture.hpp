#pragma once

#include "cctlab/errors.hpp"
#include "cctlab/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cctlab {

/// Declarative description of one compact convolutional transformer variant:
/// a convolutional tokenizer stack feeding transformer encoder blocks, closed
/// by sequence pooling and a fully connected classifier.
///
/// Tokenizer geometry: every conv layer uses stride 1 with same-padding, so
/// only the pooled layers shrink the grid. A 3x3/stride-2/pad-1 max pool maps
/// side S to floor((S-1)/2)+1 (32 -> 16 -> 8). The token count is the square
/// of the final grid side and is derived, never configured.
struct ArchitectureSpec {
    int num_conv_layers = 1;
    int conv_kernel = 3;
    int conv_channels = 0; ///< 0 means "same as dim"
    std::set<int> pool_after = {1}; ///< 1-based conv-layer indices followed by max pooling
    int num_blocks = 7;
    int dim = 256;
    std::vector<int> heads_per_block = {4, 4, 4, 4, 4, 4, 4};
    int ff_expansion = 2;
    int num_labels = 100;
    int input_size = 32;
    int input_channels = 3;

    int channels() const { return conv_channels > 0 ? conv_channels : dim; }
    int heads(int block) const { return heads_per_block[static_cast<std::size_t>(block)]; }
    int head_size(int block) const { return dim / heads(block); }
    int ff_dim() const { return dim * ff_expansion; }

    /// Side of the spatial grid after the tokenizer.
    int token_grid() const {
        int s = input_size;
        for (int i = 1; i <= num_conv_layers; ++i)
            if (pool_after.count(i)) s = (s - 1) / 2 + 1;
        return s;
    }

    int tokens() const { return token_grid() * token_grid(); }

    /// Total layer count: conv layers + 4 per block (attention, projection,
    /// two feedforward) + the classifier's fully connected layer.
    int layer_latency() const { return num_conv_layers + 4 * num_blocks + 1; }

    void validate() const {
        if (num_conv_layers < 1) throw ConfigError("num_conv_layers must be >= 1");
        if (num_blocks < 0) throw ConfigError("num_blocks must be >= 0");
        if (num_labels < 2) throw ConfigError("num_labels must be >= 2");
        if (dim < 1) throw ConfigError("dim must be >= 1");
        if (conv_kernel < 1 || conv_kernel % 2 == 0)
            throw ConfigError("conv_kernel must be odd and positive");
        if (ff_expansion < 1) throw ConfigError("ff_expansion must be >= 1");
        if (input_size < 1) throw ConfigError("input_size must be >= 1");
        if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
        if (static_cast<int>(heads_per_block.size()) != num_blocks)
            throw ConfigError("heads_per_block must have exactly num_blocks entries (got " +
                              std::to_string(heads_per_block.size()) + ", expected " +
                              std::to_string(num_blocks) + ")");
        for (std::size_t i = 0; i < heads_per_block.size(); ++i) {
            const int h = heads_per_block[i];
            if (h < 1) throw ConfigError("heads_per_block[" + std::to_string(i) + "] must be >= 1");
            if (dim % h != 0)
                throw ConfigError("dim (" + std::to_string(dim) + ") must be divisible by heads_per_block[" +
                                  std::to_string(i) + "] = " + std::to_string(h));
        }
        for (int p : pool_after)
            if (p < 1 || p > num_conv_layers)
                throw ConfigError("pool_after index " + std::to_string(p) + " out of range");
        if (num_blocks > 0 && channels() != dim)
            throw ConfigError("conv_channels must equal dim when transformer blocks are present");
        if (token_grid() < 1) throw ConfigError("input_size too small for the pooling schedule");
    }

    std::string to_config_text() const {
        std::ostringstream os;
        os << "num_conv_layers = " << num_conv_layers << "\n";
        os << "conv_kernel = " << conv_kernel << "\n";
        os << "conv_channels = " << channels() << "\n";
        os << "pool_after = " << join(std::vector<int>(pool_after.begin(), pool_after.end())) << "\n";
        os << "num_blocks = " << num_blocks << "\n";
        os << "dim = " << dim << "\n";
        os << "heads_per_block = " << join(heads_per_block) << "\n";
        os << "ff_expansion = " << ff_expansion << "\n";
        os << "num_labels = " << num_labels << "\n";
        os << "input_size = " << input_size << "\n";
        os << "input_channels = " << input_channels << "\n";
        return os.str();
    }

    static ArchitectureSpec from_config_text(const std::string& text) {
        ArchitectureSpec s;
        s.pool_after.clear();
        s.heads_per_block.clear();
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos || line.empty() || line[0] == '#') continue;
            std::string key = trim(line.substr(0, eq));
            std::string val = trim(line.substr(eq + 1));
            if (key == "num_conv_layers") s.num_conv_layers = std::stoi(val);
            else if (key == "conv_kernel") s.conv_kernel = std::stoi(val);
            else if (key == "conv_channels") s.conv_channels = std::stoi(val);
            else if (key == "pool_after") for (int v : parse_list(val)) s.pool_after.insert(v);
            else if (key == "num_blocks") s.num_blocks = std::stoi(val);
            else if (key == "dim") s.dim = std::stoi(val);
            else if (key == "heads_per_block") s.heads_per_block = parse_list(val);
            else if (key == "ff_expansion") s.ff_expansion = std::stoi(val);
            else if (key == "num_labels") s.num_labels = std::stoi(val);
            else if (key == "input_size") s.input_size = std::stoi(val);
            else if (key == "input_channels") s.input_channels = std::stoi(val);
            else throw ConfigError("unknown architecture key: " + key);
        }
        s.validate();
        return s;
    }

    static ArchitectureSpec from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open architecture file: " + path.string());
        std::ostringstream os;
        os << in.rdbuf();
        return from_config_text(os.str());
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write architecture file: " + path.string());
        out << to_config_text();
    }

    std::uint64_t hash() const { return fnv1a(to_config_text()); }

    bool operator==(const ArchitectureSpec& o) const {
        return to_config_text() == o.to_config_text();
    }

private:
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? "" : s.substr(b, e - b + 1);
    }
    static std::vector<int> parse_list(const std::string& s) {
        std::vector<int> out;
        std::istringstream is(s);
        std::string tok;
        while (std::getline(is, tok, ','))
            if (!trim(tok).empty()) out.push_back(std::stoi(trim(tok)));
        return out;
    }
    static std::string join(const std::vector<int>& v) {
        std::ostringstream os;
        for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
        return os.str();
    }
};

/// Named architecture presets. "cct-N/KxC" = N transformer blocks, KxK conv
/// kernels, C conv layers. Suffix "-hM" overrides the last block's head
/// count; suffix "-tiny" shrinks to a desk-scale variant (dim 32, 10 labels,
/// 16x16 inputs).
inline ArchitectureSpec architecture_preset(const std::string& name) {
    auto base = [](int blocks, int convs, int dim, std::vector<int> heads) {
        ArchitectureSpec s;
        s.num_conv_layers = convs;
        s.num_blocks = blocks;
        s.dim = dim;
        s.heads_per_block = std::move(heads);
        return s;
    };

    std::string id = name;
    bool tiny = false;
    if (id.size() > 5 && id.substr(id.size() - 5) == "-tiny") {
        tiny = true;
        id = id.substr(0, id.size() - 5);
    }
    int last_heads = 0;
    {
        const auto pos = id.rfind("-h");
        if (pos != std::string::npos && pos > 0 &&
            id.find_first_not_of("0123456789", pos + 2) == std::string::npos) {
            last_heads = std::stoi(id.substr(pos + 2));
            id = id.substr(0, pos);
        }
    }

    ArchitectureSpec s;
    if (id == "cct-7/3x1") s = base(7, 1, 256, std::vector<int>(7, 4));
    else if (id == "cct-2/3x5") s = base(2, 5, 256, {4, 4});
    else if (id == "cct-2/3x2") s = base(2, 2, 512, {8, 8});
    else if (id == "cct-1/3x1") s = base(1, 1, 256, {4});
    else if (id == "cct-1/3x2") s = base(1, 2, 256, {4});
    else throw ConfigError("unknown architecture preset: " + name);

    if (last_heads > 0) s.heads_per_block.back() = last_heads;
    if (tiny) {
        s.dim = 32;
        s.conv_channels = 0;
        s.num_labels = 10;
        s.input_size = 16;
        for (auto& h : s.heads_per_block) h = std::min(h, 4);
    }
    s.validate();
    return s;
}

/// Resolves an architecture argument: preset name first, then config file.
inline ArchitectureSpec resolve_architecture(const std::string& arg) {
    try {
        return architecture_preset(arg);
    } catch (const ConfigError&) {
        if (std::filesystem::exists(arg)) return ArchitectureSpec::from_file(arg);
        throw;
    }
}

} // namespace cctlab
