#include "dialign/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "dialign/errors.hpp"

namespace dialign {

namespace {

bool blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

constexpr std::string_view kRewriteHeader =
    "You will be provided with a conversation among multiple people. The last utterance in the "
    "conversation may be expressed in a less formal way, or there may be co-references or "
    "omissions. Please rewrite the last utterance, such as performing coreference resolution and "
    "ellipsis resolution, to make its expression more formal and complete without introducing "
    "redundant information. Only output the rewritten last utterance without additional content.\n"
    "\n"
    "Here are some examples.\n"
    "\n"
    "Example 1:\n"
    "Conversation:\n"
    "Speaker 1: oh my god my internet is soooo slooooowwww\n"
    "Rewritten Utterance:\n"
    "My internet is so slow.\n"
    "\n"
    "Example 2:\n"
    "Conversation:\n"
    "Speaker 1: I think it is because of permissions.\n"
    "Speaker 2: Why are you using an RPM package in Ubuntu?\n"
    "Speaker 2: You should use sudo to execute commands with superuser privileges.\n"
    "Speaker 2: Additionally, Ubuntu uses Debian (deb) packages, not Red Hat Package Manager "
    "(rpm) packages.\n"
    "Speaker 3: just put it in front of any command that you want to run as root .\n"
    "Rewritten Utterance:\n"
    "Just put \"sudo\" in front of any command that you wish to execute with root privileges.\n"
    "\n"
    "Example 3:\n"
    "Conversation:\n"
    "Speaker 1: is ubuntu 7.01 is compatilable with windows vista ? ? ? ?\n"
    "Speaker 2: compatible in what way ? you can have both 7.10 and vista on same system\n"
    "Speaker 3: do you mean : can the grub bool loader boot windows vista ?\n"
    "Speaker 4: the only compatibility issue is with it 's hardware\n"
    "Rewritten Utterance:\n"
    "The only compatibility issue between Ubuntu 7.10 and Windows Vista pertains to the hardware "
    "requirements of the system.\n"
    "\n"
    "Please rewrite the last utterance of the following conversation. The rewritten utterances "
    "need to be as concise as possible, retaining important content, and not exceeding 20 words "
    "per utterance after rewriting.\n"
    "\n";

constexpr std::string_view kRewriteFooter = "\nRewritten Utterance:\n";

constexpr std::string_view kResponseHeader =
    "You will be provided with a conversation among multiple people. The number of the utterance "
    "being replied to in the current round of dialogue is provided at the beginning of each "
    "round, and this number is placed in square brackets.\n"
    "\n"
    "Here are some examples.\n"
    "\n"
    "Example 1:\n"
    "Conversation:\n"
    "[1] Speaker 1: what is the best desktop search for ubuntu ? i just found beagle\n"
    "[1] Speaker 2: best is subjective , but tracker was included by default in gutsy , so i "
    "suppose you could say that ubuntu developers think tracker is the best\n"
    "[2] Speaker 3: so stop the whining and use masm\n"
    "[1] Speaker 4: find -name 'keyword ' for the win\n"
    "[1] Speaker 2: tracker ? it 's a desktop search applications .\n"
    "[3] Speaker 2: then how , pray tell , will i be using it ?\n"
    "[3] Speaker 2:\n"
    "Response:\n"
    "is there some magical linux port of masm that i have n't heard of ?\n"
    "\n"
    "Example 2:\n"
    "Conversation:\n"
    "[1] Speaker 1: how can i conveniently open an iso ? like without mounting it from cli\n"
    "[1] Speaker 2: open it with archive manager\n"
    "[2] Speaker 1: does that work ? what archive manager= ?\n"
    "[3] Speaker 3: you can open it with the archive manager ( its name is `` file-roller '' , "
    "the app that opens FILEPATH files ) then it 'll be mounted as an archive , but you 'll have "
    "to extract the data from it . it 's not as convenient as mounting\n"
    "[3] Speaker 3: thus , install gmountiso if you want to graphically manage your mounting "
    "points EMOJI\n"
    "[3] Speaker 2:\n"
    "Response:\n"
    "i just opened an iso with the built in archive manager\n"
    "\n"
    "Please generate the final response based on the context and structure of the "
    "conversation. You only need to generate the response, do not output any extra content.\n"
    "\n";

constexpr std::string_view kResponseFooter = "\nResponse:\n";
constexpr std::string_view kConversationMarker = "Conversation:\n";

std::string speaker_tag(const std::map<std::string, int>& ordinals, const std::string& speaker) {
    return "Speaker " + std::to_string(ordinals.at(speaker));
}

}  // namespace

const char* to_string(Split split) {
    switch (split) {
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "valid") return Split::Valid;
    if (name == "test") return Split::Test;
    throw ConfigError("unknown split '" + std::string(name) + "'");
}

ValidationReport validate(const DialogueContext& context) {
    ValidationReport report;
    auto add = [&](std::string field, std::string message) {
        report.push_back(Issue{0, std::move(field), std::move(message)});
    };
    const int t = context.size();
    if (t < 1) add("turns", "context must have at least one turn");
    for (int i = 1; i <= t; ++i) {
        const Turn& turn = context.turn(i);
        const std::string field = "turns[" + std::to_string(i - 1) + "]";
        if (turn.index != i) add(field + ".index", "turn indices must be contiguous from 1");
        if (turn.speaker.empty()) add(field + ".speaker", "speaker must be non-empty");
        if (blank(turn.text)) add(field + ".text", "text must be non-empty");
        if (i == 1) {
            if (turn.reply_to) add(field + ".reply_to", "first turn must not carry reply_to");
        } else if (!turn.reply_to) {
            add(field + ".reply_to", "reply_to is required after the first turn");
        } else if (*turn.reply_to >= i) {
            add(field + ".reply_to", "reply_to must precede turn");
        } else if (*turn.reply_to < 1) {
            add(field + ".reply_to", "reply_to must be a valid turn index");
        }
    }
    if (context.target_speaker.empty()) add("target_speaker", "target_speaker must be non-empty");
    if (t >= 1 && (context.target_reply_to < 1 || context.target_reply_to > t)) {
        add("target_reply_to", "target_reply_to must be in [1, " + std::to_string(t) + "]");
    }
    return report;
}

nlohmann::json to_json(const DialogueContext& context) {
    nlohmann::json turns = nlohmann::json::array();
    for (const Turn& turn : context.turns) {
        turns.push_back({{"speaker", turn.speaker},
                         {"reply_to", turn.reply_to ? nlohmann::json(*turn.reply_to) : nullptr},
                         {"text", turn.text}});
    }
    return {{"turns", std::move(turns)},
            {"target_speaker", context.target_speaker},
            {"target_reply_to", context.target_reply_to},
            {"gold_response",
             context.gold_response ? nlohmann::json(*context.gold_response) : nullptr}};
}

DialogueContext context_from_json(const nlohmann::json& record) {
    if (!record.is_object()) throw DataError("record: expected a JSON object");
    auto require = [&](const nlohmann::json& obj, const char* key, const std::string& field) {
        if (!obj.contains(key)) throw DataError(field + ": missing field");
        return obj.at(key);
    };
    DialogueContext context;
    const nlohmann::json turns = require(record, "turns", "turns");
    if (!turns.is_array()) throw DataError("turns: expected an array");
    int index = 1;
    for (const auto& item : turns) {
        const std::string field = "turns[" + std::to_string(index - 1) + "]";
        if (!item.is_object()) throw DataError(field + ": expected an object");
        Turn turn;
        turn.index = index++;
        const auto speaker = require(item, "speaker", field + ".speaker");
        if (!speaker.is_string()) throw DataError(field + ".speaker: expected a string");
        turn.speaker = speaker.get<std::string>();
        if (item.contains("reply_to") && !item.at("reply_to").is_null()) {
            const auto& reply = item.at("reply_to");
            if (!reply.is_number_integer()) throw DataError(field + ".reply_to: expected an integer");
            turn.reply_to = reply.get<int>();
        }
        const auto text = require(item, "text", field + ".text");
        if (!text.is_string()) throw DataError(field + ".text: expected a string");
        turn.text = text.get<std::string>();
        context.turns.push_back(std::move(turn));
    }
    const auto speaker = require(record, "target_speaker", "target_speaker");
    if (!speaker.is_string()) throw DataError("target_speaker: expected a string");
    context.target_speaker = speaker.get<std::string>();
    const auto target = require(record, "target_reply_to", "target_reply_to");
    if (!target.is_number_integer()) throw DataError("target_reply_to: expected an integer");
    context.target_reply_to = target.get<int>();
    if (record.contains("gold_response") && !record.at("gold_response").is_null()) {
        const auto& gold = record.at("gold_response");
        if (!gold.is_string()) throw DataError("gold_response: expected a string or null");
        context.gold_response = gold.get<std::string>();
    }
    return context;
}

Dataset load_jsonl(const std::filesystem::path& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
    Dataset dataset;
    dataset.split = options.split;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (blank(line)) continue;
        std::vector<Issue> issues;
        DialogueContext context;
        try {
            context = context_from_json(nlohmann::json::parse(line));
            for (Issue issue : validate(context)) {
                issue.line = line_no;
                issues.push_back(std::move(issue));
            }
        } catch (const nlohmann::json::parse_error& e) {
            issues.push_back(Issue{line_no, "record", std::string("invalid JSON: ") + e.what()});
        } catch (const DataError& e) {
            const std::string what = e.what();
            const auto colon = what.find(": ");
            issues.push_back(Issue{line_no, what.substr(0, colon),
                                   colon == std::string::npos ? what : what.substr(colon + 2)});
        }
        if (issues.empty()) {
            dataset.contexts.push_back(std::move(context));
            dataset.line_numbers.push_back(line_no);
            continue;
        }
        if (options.strict) {
            const Issue& first = issues.front();
            throw DataError(path.string() + ":" + std::to_string(first.line) + ": " + first.field +
                            ": " + first.message);
        }
        dataset.issues.insert(dataset.issues.end(), issues.begin(), issues.end());
    }
    if (in.bad()) throw DataError("I/O failure reading '" + path.string() + "'");
    return dataset;
}

void save_jsonl(std::span<const DialogueContext> contexts, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    for (const auto& context : contexts) out << to_json(context).dump() << '\n';
    if (!out) throw DataError("I/O failure writing '" + path.string() + "'");
}

DialogueContext with_rewritten_texts(const DialogueContext& context,
                                     std::span<const std::string> texts) {
    if (static_cast<int>(texts.size()) != context.size()) {
        throw DataError("with_rewritten_texts: expected " + std::to_string(context.size()) +
                        " texts, got " + std::to_string(texts.size()));
    }
    DialogueContext out = context;
    for (std::size_t i = 0; i < texts.size(); ++i) {
        if (blank(texts[i])) {
            throw DataError("with_rewritten_texts: replacement text for turn " +
                            std::to_string(i + 1) + " is empty");
        }
        out.turns[i].text = texts[i];
    }
    return out;
}

bool same_structure(const DialogueContext& a, const DialogueContext& b) {
    if (a.size() != b.size() || a.target_speaker != b.target_speaker ||
        a.target_reply_to != b.target_reply_to || a.gold_response != b.gold_response) {
        return false;
    }
    for (int i = 1; i <= a.size(); ++i) {
        const Turn& x = a.turn(i);
        const Turn& y = b.turn(i);
        if (x.index != y.index || x.speaker != y.speaker || x.reply_to != y.reply_to) return false;
    }
    return true;
}

std::map<std::string, int> speaker_ordinals(const DialogueContext& context) {
    std::map<std::string, int> ordinals;
    auto see = [&](const std::string& speaker) {
        if (!ordinals.contains(speaker)) {
            const int next = static_cast<int>(ordinals.size()) + 1;
            ordinals.emplace(speaker, next);
        }
    };
    for (const Turn& turn : context.turns) see(turn.speaker);
    if (!context.target_speaker.empty()) see(context.target_speaker);
    return ordinals;
}

std::string conversation_block(const DialogueContext& context, bool reply_prefix) {
    const auto ordinals = speaker_ordinals(context);
    std::ostringstream out;
    for (const Turn& turn : context.turns) {
        if (reply_prefix) out << '[' << turn.reply_to.value_or(1) << "] ";
        out << speaker_tag(ordinals, turn.speaker) << ": " << turn.text << '\n';
    }
    return out.str();
}

std::string render_prompt(const DialogueContext& context, std::string_view template_id,
                          const PromptExtras& extras) {
    const auto ordinals = speaker_ordinals(context);
    std::string prompt;
    if (template_id == kRewriteUtterance) {
        if (!extras.rewritten_prefix) {
            throw DataError("rewrite_utterance: missing rewritten_prefix extras");
        }
        const auto& prefix = *extras.rewritten_prefix;
        if (static_cast<int>(prefix.size()) >= context.size()) {
            throw DataError("rewrite_utterance: prefix covers every turn, nothing left to rewrite");
        }
        prompt.append(kRewriteHeader);
        prompt.append(kConversationMarker);
        for (std::size_t i = 0; i <= prefix.size(); ++i) {
            const Turn& turn = context.turns[i];
            const std::string& text = i < prefix.size() ? prefix[i] : turn.text;
            prompt += speaker_tag(ordinals, turn.speaker) + ": " + text + "\n";
        }
        prompt.append(kRewriteFooter);
        return prompt;
    }
    if (template_id == kGenerateResponse) {
        prompt.append(kResponseHeader);
        prompt.append(kConversationMarker);
        prompt += conversation_block(context, true);
        prompt += "[" + std::to_string(context.target_reply_to) + "] " +
                  speaker_tag(ordinals, context.target_speaker) + ":\n";
        prompt.append(kResponseFooter);
        return prompt;
    }
    throw ConfigError("unknown prompt template '" + std::string(template_id) + "'");
}

std::string extract_conversation(std::string_view prompt) {
    const auto start = prompt.rfind(kConversationMarker);
    if (start == std::string_view::npos) return {};
    auto body = prompt.substr(start + kConversationMarker.size());
    const auto end = body.find("\n\n");
    return std::string(body.substr(0, end == std::string_view::npos ? body.size() : end + 1));
}

}  // namespace dialign
