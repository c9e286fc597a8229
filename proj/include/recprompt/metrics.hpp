#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "recprompt/errors.hpp"

namespace recprompt {

/// Position of the single clicked candidate inside a ranking permutation.
/// `ranking` holds 1-based candidate indices, `labels` one 0/1 per candidate.
inline int rank_of_click(const std::vector<int>& ranking, const std::vector<int>& labels) {
    int clicked = -1;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) {
            if (clicked != -1) throw ProtocolError("multiple positive labels in impression");
            clicked = static_cast<int>(i) + 1;
        }
    }
    if (clicked == -1) throw ProtocolError("no positive label in impression");
    for (size_t pos = 0; pos < ranking.size(); ++pos) {
        if (ranking[pos] == clicked) return static_cast<int>(pos) + 1;
    }
    throw ProtocolError("clicked candidate missing from ranking");
}

struct UserMetrics {
    double auc = 0;
    double rr = 0;
    double ndcg5 = 0;
    double ndcg10 = 0;
};

/// Closed forms for a single relevant item at `rank` among `n_candidates`.
/// AUC is the fraction of negatives the positive outranks; the ideal DCG is 1.
inline UserMetrics user_metrics(int rank, int n_candidates) {
    if (n_candidates < 2) throw ProtocolError("need at least 2 candidates");
    if (rank < 1 || rank > n_candidates) throw ProtocolError("rank out of range");
    UserMetrics m;
    m.auc = static_cast<double>(n_candidates - rank) / (n_candidates - 1);
    m.rr = 1.0 / rank;
    double gain = 1.0 / std::log2(rank + 1.0);
    m.ndcg5 = rank <= 5 ? gain : 0.0;
    m.ndcg10 = rank <= 10 ? gain : 0.0;
    return m;
}

struct PerUserMetrics {
    std::string user_id;
    int rank_of_click = 0;
    UserMetrics m;
};

struct MetricReport {
    double auc = 0;
    double mrr = 0;
    double ndcg5 = 0;
    double ndcg10 = 0;
    size_t n_users = 0;
    std::vector<PerUserMetrics> per_user; // optional detail
};

inline MetricReport aggregate(const std::vector<PerUserMetrics>& users,
                              bool keep_per_user = true) {
    if (users.empty()) throw ProtocolError("cannot aggregate an empty user set");
    MetricReport r;
    for (const auto& u : users) {
        r.auc += u.m.auc;
        r.mrr += u.m.rr;
        r.ndcg5 += u.m.ndcg5;
        r.ndcg10 += u.m.ndcg10;
    }
    r.n_users = users.size();
    r.auc /= r.n_users;
    r.mrr /= r.n_users;
    r.ndcg5 /= r.n_users;
    r.ndcg10 /= r.n_users;
    if (keep_per_user) r.per_user = users;
    return r;
}

inline nlohmann::json report_to_json(const MetricReport& r, bool with_per_user = false) {
    nlohmann::json j;
    j["auc"] = r.auc;
    j["mrr"] = r.mrr;
    j["ndcg5"] = r.ndcg5;
    j["ndcg10"] = r.ndcg10;
    j["n_users"] = r.n_users;
    if (with_per_user) {
        auto& arr = j["per_user"] = nlohmann::json::array();
        for (const auto& u : r.per_user) {
            arr.push_back({{"user_id", u.user_id},
                           {"rank_of_click", u.rank_of_click},
                           {"auc", u.m.auc},
                           {"rr", u.m.rr},
                           {"ndcg5", u.m.ndcg5},
                           {"ndcg10", u.m.ndcg10}});
        }
    }
    return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.auc = j.at("auc").get<double>();
    r.mrr = j.at("mrr").get<double>();
    r.ndcg5 = j.at("ndcg5").get<double>();
    r.ndcg10 = j.at("ndcg10").get<double>();
    r.n_users = j.at("n_users").get<size_t>();
    if (j.contains("per_user")) {
        for (const auto& u : j["per_user"]) {
            PerUserMetrics p;
            p.user_id = u.value("user_id", "");
            p.rank_of_click = u.value("rank_of_click", 0);
            p.m.auc = u.value("auc", 0.0);
            p.m.rr = u.value("rr", 0.0);
            p.m.ndcg5 = u.value("ndcg5", 0.0);
            p.m.ndcg10 = u.value("ndcg10", 0.0);
            r.per_user.push_back(std::move(p));
        }
    }
    return r;
}

/// Display scale used in result tables: mean x 100, two decimals.
inline std::string format_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
    return std::string(buf);
}

inline std::string format_report_row(const std::string& label, const MetricReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-16s %8s %8s %8s %8s", label.c_str(),
                  format_pct(r.auc).c_str(), format_pct(r.mrr).c_str(),
                  format_pct(r.ndcg5).c_str(), format_pct(r.ndcg10).c_str());
    return std::string(buf);
}

inline std::string report_table_header() {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-16s %8s %8s %8s %8s", "Model", "AUC", "MRR", "nDCG@5",
                  "nDCG@10");
    return std::string(buf);
}

} // namespace recprompt
