#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace dialign {

/// One speaker-attributed utterance. `index` is 1-based; `reply_to` names the
/// earlier turn this one addresses and is absent only on turn 1.
struct Turn {
    int index = 1;
    std::string speaker;
    std::optional<int> reply_to;
    std::string text;

    bool operator==(const Turn&) const = default;
};

/// A dialogue history plus the slot to be filled: who speaks next and which
/// turn they reply to. The addressee speaker is derived from `target_reply_to`.
struct DialogueContext {
    std::vector<Turn> turns;
    std::string target_speaker;
    int target_reply_to = 1;
    std::optional<std::string> gold_response;

    int size() const { return static_cast<int>(turns.size()); }
    const Turn& turn(int index) const { return turns.at(static_cast<std::size_t>(index - 1)); }

    bool operator==(const DialogueContext&) const = default;
};

enum class Split { Train, Valid, Test };

const char* to_string(Split split);
Split parse_split(std::string_view name);

struct Issue {
    std::size_t line = 0;  // 0 when not tied to a file line
    std::string field;
    std::string message;

    bool operator==(const Issue&) const = default;
};

using ValidationReport = std::vector<Issue>;

struct Dataset {
    Split split = Split::Train;
    std::vector<DialogueContext> contexts;
    std::vector<std::size_t> line_numbers;  // parallel to contexts
    std::vector<Issue> issues;              // rejected lines (non-strict loads)
};

struct LoadOptions {
    Split split = Split::Train;
    bool strict = false;
};

ValidationReport validate(const DialogueContext& context);

nlohmann::json to_json(const DialogueContext& context);

/// Parses one record. Throws DataError naming the offending field; the
/// returned context is structurally decoded but not yet validated.
DialogueContext context_from_json(const nlohmann::json& record);

Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options = {});
void save_jsonl(std::span<const DialogueContext> contexts, const std::filesystem::path& path);

/// Same structure, new utterance texts.
DialogueContext with_rewritten_texts(const DialogueContext& context,
                                     std::span<const std::string> texts);

/// True when speakers, reply links, and target fields agree (texts may differ).
bool same_structure(const DialogueContext& a, const DialogueContext& b);

/// Speaker label -> 1-based ordinal by first appearance (turns, then target).
std::map<std::string, int> speaker_ordinals(const DialogueContext& context);

/// "Speaker k: text" lines, one per turn. With `reply_prefix`, each line is
/// preceded by "[r] " where r is the reply-to index (1 for the opening turn).
std::string conversation_block(const DialogueContext& context, bool reply_prefix);

struct PromptExtras {
    /// Already-rewritten utterances for turns 1..l-1 when rewriting turn l.
    std::optional<std::vector<std::string>> rewritten_prefix;
};

inline constexpr std::string_view kRewriteUtterance = "rewrite_utterance";
inline constexpr std::string_view kGenerateResponse = "generate_response";

/// Renders one of the two generation prompts. Throws ConfigError for an
/// unknown template id and DataError when required extras are missing.
std::string render_prompt(const DialogueContext& context, std::string_view template_id,
                          const PromptExtras& extras = {});

/// Inverse helper for mock backends: the Conversation block of a rendered
/// prompt (empty when the marker is absent).
std::string extract_conversation(std::string_view prompt);

}  // namespace dialign
