// SPDX-License-Identifier: Apache-2.0
#include "cpolab/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>

#include "cpolab/errors.hpp"

namespace cpolab {

namespace {

constexpr std::array kFirst{"Ana", "Ben", "Cora", "Dev", "Eli", "Fay", "Gus", "Hana", "Ivo", "Jun", "Kai", "Lena"};
constexpr std::array kLast{"Ruiz", "Okoro", "Lind", "Sato", "Marsh", "Novak", "Tran", "Diaz", "Berg", "Quinn"};
constexpr std::array kCity{"Lima", "Oslo", "Perth", "Quito", "Riga", "Cork", "Accra", "Hue", "Bern", "Goa"};
constexpr std::array kDay{"Monday", "Tuesday", "Friday", "Sunday"};
constexpr std::array kObject{"bakery", "museum", "library", "garden", "cafe", "studio", "market", "clinic"};
constexpr std::array kVerb{"opened", "renovated", "expanded", "reopened"};

// Draws with a plain modulo so the output does not depend on the standard
// library's distribution implementation.
class Draw {
public:
    explicit Draw(std::uint64_t seed) : rng_(seed) {}

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }
    template <typename A>
    std::string pick(const A& a) {
        return a[below(a.size())];
    }
    template <typename A>
    std::string pick_other(const A& a, const std::string& not_this) {
        for (;;) {
            std::string s = pick(a);
            if (s != not_this) {
                return s;
            }
        }
    }

private:
    std::mt19937_64 rng_;
};

struct Facts {
    std::string person;
    std::string verb;
    std::string object;
    std::string city;
    std::string day;
    int visitors = 0;
};

Facts draw_facts(Draw& d) {
    Facts f;
    f.person = d.pick(kFirst) + " " + d.pick(kLast);
    f.verb = d.pick(kVerb);
    f.object = d.pick(kObject);
    f.city = d.pick(kCity);
    f.day = d.pick(kDay);
    f.visitors = static_cast<int>(10 * (2 + d.below(8)));
    return f;
}

std::string article_text(const Facts& f) {
    return f.person + " " + f.verb + " a " + f.object + " in " + f.city + " on " + f.day + ". It drew " +
           std::to_string(f.visitors) + " visitors.";
}

// Sentence kinds: 0 where, 1 how many, 2 when.
std::string consistent_sentence(const Facts& f, int kind) {
    switch (kind) {
    case 0:
        return f.person + " " + f.verb + " a " + f.object + " in " + f.city + ".";
    case 1:
        return "The " + f.object + " drew " + std::to_string(f.visitors) + " visitors.";
    default:
        return "It happened on " + f.day + ".";
    }
}

std::string inconsistent_sentence(const Facts& f, int kind, Draw& d) {
    switch (kind) {
    case 0:
        return f.person + " " + f.verb + " a " + f.object + " in " + d.pick_other(kCity, f.city) + ".";
    case 1: {
        int other = f.visitors;
        while (other == f.visitors) {
            other = static_cast<int>(10 * (2 + d.below(8)));
        }
        return "The " + f.object + " drew " + std::to_string(other) + " visitors.";
    }
    default:
        return "It happened on " + d.pick_other(kDay, f.day) + ".";
    }
}

std::string join(const std::vector<LabeledSentence>& sentences) {
    std::string out;
    for (const auto& s : sentences) {
        if (!out.empty()) {
            out += ' ';
        }
        out += s.text;
    }
    return out;
}

// Two distinct sentence kinds in article order.
std::pair<int, int> two_kinds(Draw& d) {
    const int a = static_cast<int>(d.below(3));
    int b = static_cast<int>(d.below(2));
    if (b >= a) {
        ++b;
    }
    return a < b ? std::pair{a, b} : std::pair{b, a};
}

} // namespace

std::vector<AnnotatedSummary> synthetic_corpus(const SyntheticOptions& options) {
    if (options.count == 0) {
        throw InputError("synthetic corpus needs at least one record");
    }
    if (!(options.positive_fraction >= 0.0 && options.positive_fraction <= 1.0)) {
        throw ConfigError("positive_fraction must lie in [0, 1]");
    }
    const auto n_pos = static_cast<std::size_t>(std::llround(static_cast<double>(options.count) *
                                                             options.positive_fraction));
    Draw d(options.seed);
    std::vector<bool> positive_flags(options.count, false);
    std::fill_n(positive_flags.begin(), n_pos, true);
    for (std::size_t i = options.count; i > 1; --i) {
        std::swap(positive_flags[i - 1], positive_flags[d.below(i)]);
    }
    std::vector<AnnotatedSummary> out;
    out.reserve(options.count);
    for (std::size_t i = 0; i < options.count; ++i) {
        const Facts f = draw_facts(d);
        AnnotatedSummary r;
        r.article_id = "syn-" + std::to_string(options.seed) + "-" + std::to_string(i);
        r.article = article_text(f);
        r.source_model = "synthetic";
        r.data_source = DataSource::synthetic;
        const bool positive = positive_flags[i];
        const auto [a, b] = two_kinds(d);
        const bool two = d.below(2) == 1;
        if (positive) {
            r.sentences.push_back({consistent_sentence(f, a), 1});
            if (two) {
                r.sentences.push_back({consistent_sentence(f, b), 1});
            }
        } else if (!two) {
            r.sentences.push_back({inconsistent_sentence(f, a, d), 0});
        } else {
            // At least one of the two sentences is inconsistent.
            switch (d.below(3)) {
            case 0:
                r.sentences.push_back({consistent_sentence(f, a), 1});
                r.sentences.push_back({inconsistent_sentence(f, b, d), 0});
                break;
            case 1:
                r.sentences.push_back({inconsistent_sentence(f, a, d), 0});
                r.sentences.push_back({consistent_sentence(f, b), 1});
                break;
            default:
                r.sentences.push_back({inconsistent_sentence(f, a, d), 0});
                r.sentences.push_back({inconsistent_sentence(f, b, d), 0});
                break;
            }
        }
        r.summary = join(r.sentences);
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<ProbePair> synthetic_probe_pairs(std::size_t count, std::uint64_t seed) {
    if (count == 0) {
        throw InputError("synthetic probe set needs at least one pair");
    }
    Draw d(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<ProbePair> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const Facts f = draw_facts(d);
        const auto [a, b] = two_kinds(d);
        ProbePair p;
        p.doc_id = "probe-" + std::to_string(seed) + "-" + std::to_string(i);
        p.article = article_text(f);
        p.correct_summary = consistent_sentence(f, a) + " " + consistent_sentence(f, b);
        if (d.below(2) == 0) {
            p.incorrect_summary = inconsistent_sentence(f, a, d) + " " + consistent_sentence(f, b);
        } else {
            p.incorrect_summary = consistent_sentence(f, a) + " " + inconsistent_sentence(f, b, d);
        }
        out.push_back(std::move(p));
    }
    return out;
}

} // namespace cpolab
