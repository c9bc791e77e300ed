#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mothello/experiments.hpp"
#include "mothello/util.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace mothello::exp {

namespace {

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

}  // namespace

std::string emit_report(const fs::path& run_dir) {
    const auto manifest_path = run_dir / "manifest.json";
    if (!fs::exists(manifest_path))
        throw MissingArtifact("missing manifest: " + manifest_path.string());
    const json manifest = json::parse(read_text_file(manifest_path));
    if (manifest.at("status") != "complete")
        throw MissingArtifact("run " + manifest.at("run_id").get<std::string>() +
                              " is not complete (status=" +
                              manifest.at("status").get<std::string>() + ")");
    std::vector<std::string> missing;
    for (const auto& a : manifest.at("artifacts")) {
        const auto rel = a.get<std::string>();
        if (!fs::exists(run_dir / rel)) missing.push_back(rel);
    }
    if (!fs::exists(run_dir / "metrics.csv")) missing.push_back("metrics.csv");
    if (!missing.empty()) {
        std::string what = "missing artifacts:";
        for (const auto& m : missing) what += " " + m;
        throw MissingArtifact(what);
    }

    const json& spec = manifest.at("spec");
    const std::string preset = spec.at("preset").get<std::string>();
    std::ostringstream md;
    md << "# Run report: " << manifest.at("run_id").get<std::string>() << "\n\n";
    md << "- preset: `" << preset << "`\n";
    md << "- scale: `" << spec.at("scale").get<std::string>() << "`\n";
    md << "- seed: " << spec.at("seed").get<uint64_t>() << "\n";
    md << "- tool version: " << manifest.at("tool_version").get<std::string>() << "\n";
    md << "- created: " << manifest.at("created_at").get<std::string>() << "\n\n";

    // metrics grouped for the common layouts
    std::vector<MetricsRecord> metrics;
    {
        std::ifstream in(run_dir / "metrics.csv");
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            MetricsRecord r;
            std::stringstream ss(line);
            std::string field;
            std::getline(ss, r.metric, ',');
            std::getline(ss, field, ',');
            r.value = std::stod(field);
            std::getline(ss, r.checkpoint, ',');
            std::getline(ss, field, ',');
            r.lang_a = std::stoi(field);
            std::getline(ss, field, ',');
            r.lang_b = std::stoi(field);
            std::getline(ss, field, ',');
            r.layer = std::stoi(field);
            metrics.push_back(std::move(r));
        }
    }

    // alignment matrix, when present
    std::set<int> langs;
    std::map<std::pair<int, int>, double> cells;
    for (const auto& r : metrics) {
        if ((r.metric == "cross_probe_acc" || r.metric == "same_probe_acc") &&
            r.checkpoint == "final" && r.lang_a >= 0 && r.lang_b >= 0) {
            langs.insert(r.lang_a);
            langs.insert(r.lang_b);
            cells[{r.lang_a, r.lang_b}] = r.value;
        }
    }
    if (!cells.empty() && langs.size() > 1) {
        md << "## Pairwise alignment probe accuracy\n\n|probe \\ eval|";
        for (int j : langs) md << " " << j << " |";
        md << "\n|---|";
        for (size_t j = 0; j < langs.size(); ++j) md << "---|";
        md << "\n";
        for (int i : langs) {
            md << "| " << i << " |";
            for (int j : langs) {
                const auto it = cells.find({i, j});
                md << (it == cells.end() ? " - |" : " " + fmt3(it->second) + " |");
            }
            md << "\n";
        }
        md << "\n";
    }

    // anchor sweep table, when present
    {
        std::map<std::string, std::map<int, double>> sweep;  // pair type -> anchors -> acc
        for (const auto& r : metrics) {
            if (r.metric != "cross_probe_acc") continue;
            const auto pos = r.checkpoint.rfind("+a");
            if (pos == std::string::npos) continue;
            sweep[r.checkpoint.substr(0, pos)][std::stoi(r.checkpoint.substr(pos + 2))] = r.value;
        }
        if (!sweep.empty()) {
            std::set<int> counts;
            for (const auto& [_, row] : sweep)
                for (const auto& [n, _v] : row) counts.insert(n);
            md << "## Anchor-token effect (cross alignment accuracy)\n\n|pair type|";
            for (int n : counts) md << " " << n << " anchors |";
            md << "\n|---|";
            for (size_t i = 0; i < counts.size(); ++i) md << "---|";
            md << "\n";
            for (const auto& [pair_type, row] : sweep) {
                md << "| " << pair_type << " |";
                for (int n : counts) {
                    const auto it = row.find(n);
                    md << (it == row.end() ? " - |" : " " + fmt3(it->second) + " |");
                }
                md << "\n";
            }
            md << "\n";
        }
    }

    // transfer curves, when present
    {
        std::map<int, std::map<int, double>> top1;  // ordinal -> lang -> acc
        std::map<int, double> align;
        for (const auto& r : metrics) {
            if (r.checkpoint.rfind("ck", 0) != 0) continue;
            const int ord = std::stoi(r.checkpoint.substr(2));
            if (r.metric == "top1_legal_acc") top1[ord][r.lang_a] = r.value;
            if (r.metric == "cross_probe_acc") align[ord] = r.value;
        }
        if (!top1.empty()) {
            md << "## Finetuning checkpoints\n\n|checkpoint|";
            const auto& first = top1.begin()->second;
            for (const auto& [k, _] : first) md << " top1 L" << k << " |";
            md << " alignment |\n|---|";
            for (size_t i = 0; i <= first.size(); ++i) md << "---|";
            md << "\n";
            for (const auto& [ord, row] : top1) {
                md << "| " << ord << " |";
                for (const auto& [_, v] : row) md << " " << fmt3(v) << " |";
                const auto it = align.find(ord);
                md << (it == align.end() ? " - |" : " " + fmt3(it->second) + " |") << "\n";
            }
            md << "\n";
        }
    }

    // everything else, flat
    md << "## All metrics\n\n|metric|value|checkpoint|lang_a|lang_b|layer|\n|---|---|---|---|---|---|\n";
    for (const auto& r : metrics)
        md << "| " << r.metric << " | " << fmt3(r.value) << " | " << r.checkpoint << " | "
           << r.lang_a << " | " << r.lang_b << " | " << r.layer << " |\n";
    md << "\nPlot-ready CSVs: `metrics.csv`, `matrices/*.csv`, `curves/*.csv`.\n";

    const std::string text = md.str();
    write_text_file(run_dir / "report.md", text);
    return text;
}

}  // namespace mothello::exp
