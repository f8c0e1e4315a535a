#include "archive.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "util.hpp"

namespace lw {

namespace {

constexpr char kVolumeMagic[8] = {'L', 'W', 'V', 'X', '0', '0', '0', '1'};
constexpr char kModelMagic[8] = {'L', 'W', 'M', 'D', '0', '0', '0', '1'};

void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
    buf.push_back(static_cast<uint8_t>(v));
    buf.push_back(static_cast<uint8_t>(v >> 8));
    buf.push_back(static_cast<uint8_t>(v >> 16));
    buf.push_back(static_cast<uint8_t>(v >> 24));
}

void put_u64(std::vector<uint8_t>& buf, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}

void put_f32(std::vector<uint8_t>& buf, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t at = 0;
    std::string path;

    void need(size_t n) const {
        if (at + n > buf.size()) {
            fail_data("truncated file: " + path);
        }
    }
    uint8_t u8() {
        need(1);
        return buf[at++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = buf[at] | (buf[at + 1] << 8) | (buf[at + 2] << 16) |
                     (static_cast<uint32_t>(buf[at + 3]) << 24);
        at += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<uint64_t>(buf[at + i]) << (8 * i);
        }
        at += 8;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string out(reinterpret_cast<const char*>(buf.data() + at), n);
        at += n;
        return out;
    }
};

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail_data("cannot open file: " + path);
    }
    in.seekg(0, std::ios::end);
    std::streamoff size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<uint8_t> buf(static_cast<size_t>(size));
    if (size > 0) {
        in.read(reinterpret_cast<char*>(buf.data()), size);
    }
    if (!in) {
        fail_data("failed reading file: " + path);
    }
    return buf;
}

void write_file(const std::string& path, const std::vector<uint8_t>& buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        fail_data("cannot create file: " + path);
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size()));
    if (!out) {
        fail_data("failed writing file: " + path);
    }
}

}  // namespace

/*----------------------------------- volumes -----------------------------------*/

Volume Volume::of(DenseLatentGrid grid) {
    Volume v;
    v.kind = VolumeKind::dense;
    v.dense = std::move(grid);
    return v;
}

Volume Volume::of(SparseLatent latent) {
    Volume v;
    v.kind = VolumeKind::sparse;
    v.sparse = std::move(latent);
    return v;
}

Volume Volume::of(OccupancyField field) {
    Volume v;
    v.kind = VolumeKind::occupancy;
    v.occupancy = std::move(field);
    return v;
}

GridDims Volume::dims() const {
    switch (kind) {
        case VolumeKind::dense:
            return dense.dims;
        case VolumeKind::sparse:
            return sparse.dims();
        default:
            return occupancy.dims;
    }
}

void save_volume(const Volume& volume, const std::string& path) {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), kVolumeMagic, kVolumeMagic + 8);
    buf.push_back(static_cast<uint8_t>(volume.kind));
    GridDims dims = volume.dims();
    put_u32(buf, static_cast<uint32_t>(dims.d));
    put_u32(buf, static_cast<uint32_t>(dims.h));
    put_u32(buf, static_cast<uint32_t>(dims.w));
    put_u32(buf, static_cast<uint32_t>(dims.c));
    switch (volume.kind) {
        case VolumeKind::dense:
            for (float v : volume.dense.data) {
                put_f32(buf, v);
            }
            break;
        case VolumeKind::sparse: {
            const SparseLatent& s = volume.sparse;
            put_u64(buf, s.size());
            for (size_t i = 0; i < s.size(); ++i) {
                const Vox& p = s.positions()[i];
                put_u32(buf, static_cast<uint32_t>(p.x));
                put_u32(buf, static_cast<uint32_t>(p.y));
                put_u32(buf, static_cast<uint32_t>(p.z));
                const float* f = s.feature(i);
                for (int ch = 0; ch < dims.c; ++ch) {
                    put_f32(buf, f[ch]);
                }
            }
            break;
        }
        case VolumeKind::occupancy:
            put_f32(buf, volume.occupancy.threshold);
            for (float v : volume.occupancy.values) {
                put_f32(buf, v);
            }
            break;
    }
    write_file(path, buf);
}

Volume load_volume(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    Reader r{data, 0, path};
    if (r.bytes(8) != std::string(kVolumeMagic, 8)) {
        fail_data("bad magic in volume file: " + path);
    }
    uint8_t kind = r.u8();
    GridDims dims;
    dims.d = static_cast<int>(r.u32());
    dims.h = static_cast<int>(r.u32());
    dims.w = static_cast<int>(r.u32());
    dims.c = static_cast<int>(r.u32());
    dims.validate();
    Volume out;
    switch (kind) {
        case 0: {
            out.kind = VolumeKind::dense;
            out.dense = DenseLatentGrid(dims);
            for (float& v : out.dense.data) {
                v = r.f32();
            }
            break;
        }
        case 1: {
            out.kind = VolumeKind::sparse;
            uint64_t count = r.u64();
            std::vector<Vox> positions(count);
            std::vector<float> feats(count * static_cast<size_t>(dims.c));
            for (uint64_t i = 0; i < count; ++i) {
                positions[i].x = static_cast<int>(r.u32());
                positions[i].y = static_cast<int>(r.u32());
                positions[i].z = static_cast<int>(r.u32());
                for (int ch = 0; ch < dims.c; ++ch) {
                    feats[i * dims.c + ch] = r.f32();
                }
            }
            out.sparse = SparseLatent(dims, std::move(positions), std::move(feats));
            break;
        }
        case 2: {
            out.kind = VolumeKind::occupancy;
            if (dims.c != 1) {
                fail_data("occupancy volume must have c = 1: " + path);
            }
            float threshold = r.f32();
            out.occupancy = OccupancyField(dims, 0.0f, threshold);
            for (float& v : out.occupancy.values) {
                v = r.f32();
            }
            break;
        }
        default:
            fail_data(format("unknown volume kind %d in %s", kind, path.c_str()));
    }
    if (r.at != data.size()) {
        fail_data("trailing bytes in volume file: " + path);
    }
    return out;
}

/*----------------------------------- checkpoints -----------------------------------*/

namespace {

void put_section(std::vector<uint8_t>& buf, const std::string& name,
                 const std::vector<uint8_t>& payload) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_u64(buf, payload.size());
    buf.insert(buf.end(), payload.begin(), payload.end());
}

std::vector<uint8_t> f32_payload(const std::vector<double>& values) {
    std::vector<uint8_t> out;
    out.reserve(values.size() * 4);
    for (double v : values) {
        put_f32(out, static_cast<float>(v));
    }
    return out;
}

std::vector<double> f32_values(const std::vector<uint8_t>& payload, const std::string& name) {
    if (payload.size() % 4 != 0) {
        fail_data("checkpoint section " + name + " has a ragged payload");
    }
    std::vector<double> out(payload.size() / 4);
    for (size_t i = 0; i < out.size(); ++i) {
        uint32_t bits = payload[4 * i] | (payload[4 * i + 1] << 8) |
                        (payload[4 * i + 2] << 16) |
                        (static_cast<uint32_t>(payload[4 * i + 3]) << 24);
        float v;
        std::memcpy(&v, &bits, 4);
        out[i] = v;
    }
    return out;
}

std::vector<uint8_t> hyper_payload(const FlowModelConfig& cfg) {
    std::vector<uint8_t> out;
    put_u32(out, static_cast<uint32_t>(cfg.channels));
    put_u32(out, static_cast<uint32_t>(cfg.emb_dim));
    put_u32(out, static_cast<uint32_t>(cfg.hidden));
    put_u32(out, static_cast<uint32_t>(cfg.patch_radius));
    put_u32(out, static_cast<uint32_t>(cfg.num_labels));
    put_u32(out, static_cast<uint32_t>(cfg.native_size));
    return out;
}

std::vector<double> decoder_params(const ToyDecoders& dec) {
    std::vector<double> out;
    out.insert(out.end(), dec.occ_w.begin(), dec.occ_w.end());
    out.push_back(dec.occ_b);
    out.insert(out.end(), dec.app_w.begin(), dec.app_w.end());
    out.insert(out.end(), dec.app_b.begin(), dec.app_b.end());
    return out;
}

std::vector<double> fusion_params(const FusionLayer& layer) {
    std::vector<double> out;
    out.insert(out.end(), layer.weight.begin(), layer.weight.end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
    return out;
}

}  // namespace

void save_bundle(const ModelBundle& bundle, const std::string& path) {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), kModelMagic, kModelMagic + 8);
    put_u32(buf, 1);  // version
    put_u32(buf, 6);  // section count
    put_section(buf, "hyper", hyper_payload(bundle.cfg));
    put_section(buf, "flow_s", f32_payload(bundle.flow_s.params));
    put_section(buf, "flow_l", f32_payload(bundle.flow_l.params));
    put_section(buf, "dec_occ",
                f32_payload([&] {
                    std::vector<double> v(bundle.decoders.occ_w);
                    v.push_back(bundle.decoders.occ_b);
                    return v;
                }()));
    put_section(buf, "dec_app",
                f32_payload([&] {
                    std::vector<double> v(bundle.decoders.app_w);
                    v.insert(v.end(), bundle.decoders.app_b.begin(), bundle.decoders.app_b.end());
                    return v;
                }()));
    put_section(buf, "fusion", f32_payload(fusion_params(bundle.fusion)));
    write_file(path, buf);
}

ModelBundle load_bundle(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    Reader r{data, 0, path};
    if (r.bytes(8) != std::string(kModelMagic, 8)) {
        fail_data("bad magic in checkpoint: " + path);
    }
    uint32_t version = r.u32();
    if (version != 1) {
        fail_data(format("unsupported checkpoint version %u in %s", version, path.c_str()));
    }
    uint32_t sections = r.u32();
    std::vector<std::pair<std::string, std::vector<uint8_t>>> parts;
    for (uint32_t i = 0; i < sections; ++i) {
        uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        uint64_t payload_len = r.u64();
        r.need(payload_len);
        std::vector<uint8_t> payload(data.begin() + r.at, data.begin() + r.at + payload_len);
        r.at += payload_len;
        parts.emplace_back(std::move(name), std::move(payload));
    }
    auto find = [&](const std::string& name) -> const std::vector<uint8_t>& {
        for (const auto& [n, p] : parts) {
            if (n == name) {
                return p;
            }
        }
        fail_data("checkpoint missing section " + name + ": " + path);
    };

    const std::vector<uint8_t>& hyper = find("hyper");
    if (hyper.size() != 24) {
        fail_data("bad hyper section in " + path);
    }
    Reader hr{hyper, 0, path};
    FlowModelConfig cfg;
    cfg.channels = static_cast<int>(hr.u32());
    cfg.emb_dim = static_cast<int>(hr.u32());
    cfg.hidden = static_cast<int>(hr.u32());
    cfg.patch_radius = static_cast<int>(hr.u32());
    cfg.num_labels = static_cast<int>(hr.u32());
    cfg.native_size = static_cast<int>(hr.u32());
    cfg.validate();

    ModelBundle bundle;
    bundle.cfg = cfg;
    bundle.flow_s = ToyFlowModel(cfg);
    bundle.flow_l = ToyFlowModel(cfg);
    bundle.flow_s.params = f32_values(find("flow_s"), "flow_s");
    bundle.flow_l.params = f32_values(find("flow_l"), "flow_l");
    if (bundle.flow_s.params.size() != bundle.flow_s.param_count() ||
        bundle.flow_l.params.size() != bundle.flow_l.param_count()) {
        fail_data("flow parameter count mismatch in " + path);
    }

    std::vector<double> occ = f32_values(find("dec_occ"), "dec_occ");
    if (occ.size() != static_cast<size_t>(cfg.channels) + 1) {
        fail_data("dec_occ parameter count mismatch in " + path);
    }
    bundle.decoders.channels = cfg.channels;
    bundle.decoders.occ_w.assign(occ.begin(), occ.end() - 1);
    bundle.decoders.occ_b = occ.back();

    std::vector<double> app = f32_values(find("dec_app"), "dec_app");
    if (app.size() != static_cast<size_t>(4) * cfg.channels + 4) {
        fail_data("dec_app parameter count mismatch in " + path);
    }
    bundle.decoders.app_w.assign(app.begin(), app.begin() + 4 * cfg.channels);
    bundle.decoders.app_b.assign(app.end() - 4, app.end());

    std::vector<double> fus = f32_values(find("fusion"), "fusion");
    bundle.fusion = init_identity(cfg.channels, cfg.channels);
    if (fus.size() != bundle.fusion.param_count()) {
        fail_data("fusion parameter count mismatch in " + path);
    }
    std::copy_n(fus.begin(), bundle.fusion.weight.size(), bundle.fusion.weight.begin());
    std::copy_n(fus.begin() + bundle.fusion.weight.size(), bundle.fusion.bias.size(),
                bundle.fusion.bias.begin());
    return bundle;
}

std::vector<uint8_t> serialize_base_params(const ModelBundle& bundle) {
    std::vector<uint8_t> buf;
    put_section(buf, "flow_s", f32_payload(bundle.flow_s.params));
    put_section(buf, "flow_l", f32_payload(bundle.flow_l.params));
    put_section(buf, "dec_occ", f32_payload([&] {
                    std::vector<double> v(bundle.decoders.occ_w);
                    v.push_back(bundle.decoders.occ_b);
                    return v;
                }()));
    put_section(buf, "dec_app", f32_payload([&] {
                    std::vector<double> v(bundle.decoders.app_w);
                    v.insert(v.end(), bundle.decoders.app_b.begin(), bundle.decoders.app_b.end());
                    return v;
                }()));
    return buf;
}

uint64_t bundle_base_hash(const ModelBundle& bundle) {
    std::vector<uint8_t> bytes = serialize_base_params(bundle);
    return fnv1a(bytes.data(), bytes.size());
}

/*----------------------------------- rasters -----------------------------------*/

namespace {

// next token in a PGM header, skipping whitespace and '#' comments
std::string pgm_token(Reader& r) {
    std::string token;
    for (;;) {
        r.need(1);
        char ch = static_cast<char>(r.buf[r.at]);
        if (ch == '#') {
            while (r.at < r.buf.size() && r.buf[r.at] != '\n') {
                r.at++;
            }
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            r.at++;
            continue;
        }
        break;
    }
    while (r.at < r.buf.size() &&
           !std::isspace(static_cast<unsigned char>(r.buf[r.at]))) {
        token.push_back(static_cast<char>(r.buf[r.at]));
        r.at++;
    }
    return token;
}

SegmentMap load_pgm(const std::vector<uint8_t>& data, const std::string& path) {
    Reader r{data, 2, path};  // past "P5"
    int width = std::stoi(pgm_token(r));
    int height = std::stoi(pgm_token(r));
    int maxval = std::stoi(pgm_token(r));
    if (width < 1 || height < 1 || maxval < 1 || maxval > 255) {
        fail_data("unsupported PGM header in " + path);
    }
    r.at++;  // single whitespace after maxval
    r.need(static_cast<size_t>(width) * height);
    SegmentMap map;
    map.width = width;
    map.height = height;
    map.labels.resize(static_cast<size_t>(width) * height);
    for (size_t i = 0; i < map.labels.size(); ++i) {
        map.labels[i] = data[r.at + i];
    }
    return map;
}

SegmentMap load_text_grid(const std::vector<uint8_t>& data, const std::string& path) {
    std::istringstream in(std::string(data.begin(), data.end()));
    SegmentMap map;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream row(line);
        std::vector<int> values;
        int v;
        while (row >> v) {
            values.push_back(v);
        }
        if (values.empty()) {
            continue;
        }
        if (map.width == 0) {
            map.width = static_cast<int>(values.size());
        } else if (static_cast<int>(values.size()) != map.width) {
            fail_data("ragged label grid in " + path);
        }
        map.labels.insert(map.labels.end(), values.begin(), values.end());
        map.height++;
    }
    if (map.width == 0 || map.height == 0) {
        fail_data("empty label grid in " + path);
    }
    return map;
}

}  // namespace

SegmentMap load_label_raster(const std::string& path) {
    std::vector<uint8_t> data = read_file(path);
    if (data.size() >= 2 && data[0] == 'P' && data[1] == '5') {
        return load_pgm(data, path);
    }
    return load_text_grid(data, path);
}

void load_prompt_table(const std::string& path, SegmentMap& map) {
    std::vector<uint8_t> data = read_file(path);
    std::istringstream in(std::string(data.begin(), data.end()));
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') {
            continue;
        }
        size_t eq = line.find('=', start);
        if (eq == std::string::npos) {
            fail_data(format("prompt table %s line %d: expected label_id=prompt", path.c_str(),
                             line_no));
        }
        int label;
        try {
            label = std::stoi(line.substr(start, eq - start));
        } catch (const std::exception&) {
            fail_data(format("prompt table %s line %d: bad label id", path.c_str(), line_no));
        }
        std::string prompt = line.substr(eq + 1);
        while (!prompt.empty() && (prompt.back() == '\r' || prompt.back() == '\n')) {
            prompt.pop_back();
        }
        map.prompts[label] = prompt;
    }
}

SegmentMap load_segment_map(const std::string& raster_path, const std::string& prompts_path) {
    SegmentMap map = load_label_raster(raster_path);
    load_prompt_table(prompts_path, map);
    map.validate();
    return map;
}

/*----------------------------------- renders -----------------------------------*/

void save_ppm(const Image& image, const std::string& path) {
    std::vector<uint8_t> buf;
    std::string header = format("P6\n%d %d\n255\n", image.width, image.height);
    buf.insert(buf.end(), header.begin(), header.end());
    buf.insert(buf.end(), image.rgb.begin(), image.rgb.end());
    write_file(path, buf);
}

namespace {

uint8_t to_byte(double v) {
    return static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
}

}  // namespace

Image render_top_view(const ToyDecoders& dec, const SparseLatent& world) {
    const GridDims& dims = world.dims();
    Image img;
    img.width = dims.w;
    img.height = dims.h;
    img.rgb.assign(static_cast<size_t>(dims.w) * dims.h * 3, 16);
    std::vector<double> best(static_cast<size_t>(dims.w) * dims.h,
                             -std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < world.size(); ++i) {
        const Vox& p = world.positions()[i];
        double out[4];
        dec.appearance(world.feature(i), out);
        size_t px = static_cast<size_t>(p.y) * dims.w + p.x;
        // max-density projection; ties resolve to the higher voxel
        double score = out[0] + 1e-9 * p.z;
        if (score <= best[px]) {
            continue;
        }
        best[px] = score;
        double shade = 0.6 + 0.4 * (static_cast<double>(p.z) / dims.d);
        img.rgb[px * 3 + 0] = to_byte(out[1] * shade);
        img.rgb[px * 3 + 1] = to_byte(out[2] * shade);
        img.rgb[px * 3 + 2] = to_byte(out[3] * shade);
    }
    return img;
}

Image render_side_view(const ToyDecoders& dec, const SparseLatent& world) {
    const GridDims& dims = world.dims();
    Image img;
    img.width = dims.w;
    img.height = dims.d;
    img.rgb.assign(static_cast<size_t>(dims.w) * dims.d * 3, 16);
    std::vector<double> best(static_cast<size_t>(dims.w) * dims.d,
                             -std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < world.size(); ++i) {
        const Vox& p = world.positions()[i];
        double out[4];
        dec.appearance(world.feature(i), out);
        int row = dims.d - 1 - p.z;  // z up
        size_t px = static_cast<size_t>(row) * dims.w + p.x;
        double score = out[0] + 1e-9 * p.y;
        if (score <= best[px]) {
            continue;
        }
        best[px] = score;
        double shade = 0.5 + 0.5 * (static_cast<double>(p.y) / dims.h);
        img.rgb[px * 3 + 0] = to_byte(out[1] * shade);
        img.rgb[px * 3 + 1] = to_byte(out[2] * shade);
        img.rgb[px * 3 + 2] = to_byte(out[3] * shade);
    }
    return img;
}

/*----------------------------------- CSV -----------------------------------*/

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        fail_data("cannot create file: " + path);
    }
    out << header << "\n";
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i > 0) {
                out << ",";
            }
            out << format("%.10g", row[i]);
        }
        out << "\n";
    }
    if (!out) {
        fail_data("failed writing file: " + path);
    }
}

std::vector<std::vector<double>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        fail_data("cannot open file: " + path);
    }
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            first = false;  // header
            continue;
        }
        if (line.empty()) {
            continue;
        }
        std::vector<double> row;
        std::istringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            row.push_back(std::stod(cell));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace lw
