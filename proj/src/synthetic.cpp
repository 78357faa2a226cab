#include "dialign/synthetic.hpp"

#include <array>
#include <random>
#include <string>

#include "dialign/errors.hpp"

namespace dialign {

namespace {

constexpr std::array<const char*, 40> kVocab = {
    "install", "driver",  "kernel", "grub",    "boot",   "disk",    "mount",  "package",
    "update",  "network", "wifi",   "screen",  "sound",  "error",   "log",    "sudo",
    "apt",     "repo",    "login",  "desktop", "gnome",  "window",  "file",   "folder",
    "iso",     "usb",     "live",   "cd",      "try",    "check",   "works",  "broken",
    "again",   "maybe",   "thanks", "really",  "which",  "version", "config", "reboot"};

std::string sentence(std::mt19937_64& rng, int min_words, int max_words) {
    std::uniform_int_distribution<int> length(min_words, max_words);
    std::uniform_int_distribution<std::size_t> word(0, kVocab.size() - 1);
    std::string out;
    const int n = length(rng);
    for (int k = 0; k < n; ++k) {
        if (k) out.push_back(' ');
        out += kVocab[word(rng)];
    }
    return out;
}

}  // namespace

std::vector<DialogueContext> synthetic_corpus(const SyntheticConfig& config) {
    if (config.contexts < 0 || config.min_turns < 1 || config.max_turns < config.min_turns ||
        config.speakers < 1 || config.marked_min < 0.0 || config.marked_max > 1.0 ||
        config.marked_min > config.marked_max) {
        throw ConfigError("synthetic corpus: invalid configuration");
    }
    std::mt19937_64 rng(config.seed);
    std::uniform_int_distribution<int> turns_dist(config.min_turns, config.max_turns);
    std::uniform_int_distribution<int> speaker_dist(1, config.speakers);
    std::uniform_real_distribution<double> rate_dist(config.marked_min, config.marked_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<DialogueContext> out;
    out.reserve(static_cast<std::size_t>(config.contexts));
    for (int c = 0; c < config.contexts; ++c) {
        DialogueContext context;
        const int t = turns_dist(rng);
        const double marked = rate_dist(rng);
        for (int i = 1; i <= t; ++i) {
            Turn turn;
            turn.index = i;
            turn.speaker = "user" + std::to_string(speaker_dist(rng));
            if (i > 1) turn.reply_to = std::uniform_int_distribution<int>(1, i - 1)(rng);
            turn.text = sentence(rng, 3, 8);
            if (i > 1 && unit(rng) < marked) turn.text = "@" + turn.text;
            context.turns.push_back(std::move(turn));
        }
        context.target_speaker = "user" + std::to_string(speaker_dist(rng));
        context.target_reply_to = std::uniform_int_distribution<int>(1, t)(rng);
        // Gold echoes part of the addressed turn, as a reply usually does.
        std::string gold = context.turn(context.target_reply_to).text;
        if (!gold.empty() && gold.front() == '@') gold.erase(0, 1);
        context.gold_response = gold + " " + sentence(rng, 1, 3);
        out.push_back(std::move(context));
    }
    return out;
}

}  // namespace dialign
