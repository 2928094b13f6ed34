// motok: batch tools around the video token pipeline.
//
//   tokenize    RVID video -> interleaved token stream (TSEQ or JSONL)
//   detokenize  token stream -> RVID video via chained sampling
//   train       one stage: tokenizer | detok | lm
//   inspect     validate and describe any file the other commands emit
//
// Machine-readable results go to stdout (JSON for tokenize/detokenize/train,
// a plain dump for inspect); progress notes and tables go to stderr.
// Exit codes: 0 ok, 1 runtime failure, 2 usage error. MOTOK_THREADS caps
// worker threads; MOTOK_CONFIG supplies --config.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "motok/checkpoint.hpp"
#include "motok/pipeline.hpp"

namespace {

using nlohmann::json;

std::string read_magic(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  char m[4] = {};
  is.read(m, 4);
  return std::string(m, m + is.gcount());
}

bool has_ext(const std::string& path, const char* ext) {
  return std::filesystem::path(path).extension() == ext;
}

motok::PipelineConfig config_or_default(const std::string& path) {
  return path.empty() ? motok::PipelineConfig{} : motok::PipelineConfig::load_file(path);
}

// The checkpoint's embedded configuration is authoritative; an explicit
// --config must agree with it.
void cross_check_config(const motok::PipelineConfig& from_ckpt, const std::string& config_path) {
  if (config_path.empty()) return;
  const motok::PipelineConfig file_cfg = motok::PipelineConfig::load_file(config_path);
  if (file_cfg.to_json() != from_ckpt.to_json()) {
    throw std::invalid_argument("--config disagrees with the checkpoint's configuration");
  }
}

void require_checkpoint(const std::string& path, const std::string& stage) {
  if (std::filesystem::exists(path)) return;
  throw std::runtime_error("checkpoint '" + path + "' not found; train one with `motok train --stage " +
                           stage + " --data <dir> --out " + path + "`");
}

std::vector<motok::TokenSequence> read_sequences(const std::string& path,
                                                 const motok::UnifiedVocab& vocab) {
  if (has_ext(path, ".jsonl")) return motok::read_jsonl(path, vocab);
  if (read_magic(path) == "TSEQ") return motok::read_tseq(path, vocab);
  throw std::invalid_argument("'" + path + "' is neither a TSEQ file nor a .jsonl file");
}

struct TokenizeOpts {
  std::string video;
  std::string out;
  std::string ckpt = "tokenizer.mtok";
  std::string config;
};

int cmd_tokenize(const TokenizeOpts& o) {
  require_checkpoint(o.ckpt, "tokenizer");
  motok::TokenizerSnapshot snap = motok::load_tokenizer(o.ckpt);
  cross_check_config(snap.cfg, o.config);
  const motok::RawVideo video = motok::read_rvid(o.video);
  const motok::TokenizeResult r = motok::tokenize_video(snap.cfg, snap.bundle, video);

  const std::vector<motok::TokenSequence> seqs{r.seq};
  if (has_ext(o.out, ".jsonl")) {
    motok::write_jsonl(o.out, seqs, snap.cfg.vocab);
  } else {
    motok::write_tseq(o.out, seqs, snap.cfg.vocab);
  }

  std::ostringstream table;
  table << "clip  visual  motion\n";
  for (size_t i = 0; i < r.visual_counts.size(); ++i) {
    table << "  " << i << "     " << r.visual_counts[i] << "     " << r.motion_counts[i] << "\n";
  }
  table << "motion codebook perplexity " << r.usage.perplexity << ", dead codes "
        << r.usage.dead_codes << "\n";
  std::cerr << table.str();

  json j;
  j["video"] = o.video;
  j["out"] = o.out;
  j["clips"] = r.visual_counts.size();
  j["visual_counts"] = r.visual_counts;
  j["motion_counts"] = r.motion_counts;
  j["tokens_total"] = r.seq.ids.size();
  j["perplexity"] = r.usage.perplexity;
  j["dead_codes"] = r.usage.dead_codes;
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct DetokenizeOpts {
  std::string tokens;
  std::string out;
  std::string detok_ckpt = "detok.mtok";
  std::string tokenizer_ckpt = "tokenizer.mtok";
  std::string config;
  int delta_t = 0;
  uint64_t seed = 0;
};

int cmd_detokenize(const DetokenizeOpts& o) {
  require_checkpoint(o.detok_ckpt, "detok");
  require_checkpoint(o.tokenizer_ckpt, "tokenizer");
  motok::DetokSnapshot dsnap = motok::load_detok_stage(o.detok_ckpt);
  motok::TokenizerSnapshot tsnap = motok::load_tokenizer(o.tokenizer_ckpt);
  if (dsnap.cfg.to_json() != tsnap.cfg.to_json()) {
    throw std::invalid_argument("detok and tokenizer checkpoints carry different configurations");
  }
  cross_check_config(dsnap.cfg, o.config);
  if (o.delta_t < 0 || o.delta_t > dsnap.cfg.sched_steps) {
    throw std::invalid_argument("--delta-t must lie in [0, " +
                                std::to_string(dsnap.cfg.sched_steps) + "]");
  }
  const std::vector<motok::TokenSequence> seqs = read_sequences(o.tokens, dsnap.cfg.vocab);
  size_t clip_count = 0;
  for (const auto& s : seqs) clip_count += motok::extract_clips(s, dsnap.cfg.vocab).size();

  const motok::RawVideo video = motok::detokenize_sequences(
      dsnap.cfg, tsnap.bundle, dsnap.net, dsnap.enc, seqs, o.delta_t, o.seed);
  motok::write_rvid(o.out, video);

  std::cerr << "decoded " << clip_count << " clip(s) into " << video.frames.size()
            << " frames at " << video.width << "x" << video.height << "\n";

  json j;
  j["tokens"] = o.tokens;
  j["out"] = o.out;
  j["clips"] = clip_count;
  j["frames"] = video.frames.size();
  j["width"] = video.width;
  j["height"] = video.height;
  j["delta_t"] = o.delta_t;
  j["seed"] = o.seed;
  std::cout << j.dump(2) << "\n";
  return 0;
}

struct TrainOpts {
  std::string stage;
  std::string data;
  std::string out;
  std::string resume;
  std::string config;
  std::optional<uint64_t> seed;
  int max_steps = -1;
};

int cmd_train(const TrainOpts& o) {
  motok::PipelineConfig cfg = config_or_default(o.config);
  if (o.seed) cfg.seed = *o.seed;
  const std::string out = o.out.empty() ? o.stage + ".mtok" : o.out;

  motok::TrainReport rep;
  if (o.stage == "tokenizer") {
    rep = motok::train_stage_tokenizer(cfg, o.data, out, o.resume, o.max_steps);
  } else if (o.stage == "detok") {
    rep = motok::train_stage_detok(cfg, o.data, out, o.resume, o.max_steps);
  } else {
    rep = motok::train_stage_lm(cfg, o.data, out, o.resume, o.max_steps);
  }

  std::ostringstream note;
  note << "stage " << rep.stage << ": steps " << rep.start_step << " -> "
       << (rep.start_step + rep.steps_done) << " of " << rep.total_steps << " in "
       << rep.wall_seconds << " s";
  if (!rep.losses.empty()) {
    note << ", loss " << rep.losses.front() << " -> " << rep.losses.back();
  }
  note << ", " << rep.held_out_name << " " << rep.held_out;
  std::cerr << note.str() << "\n";
  if (rep.aborted) std::cerr << "aborted: " << rep.diagnostics << "\n";

  std::cout << rep.to_json() << "\n";
  return rep.aborted ? 1 : 0;
}

struct InspectOpts {
  std::string file;
  std::string config;
};

int inspect_rvid(const InspectOpts& o) {
  const motok::RawVideo v = motok::read_rvid(o.file);
  v.validate();
  std::cout << "RVID " << o.file << "\n  frames " << v.frames.size() << "  size " << v.width
            << "x" << v.height << "  channels " << v.channels << "  fps " << v.fps_num << "/"
            << v.fps_den << "\n";
  return 0;
}

int inspect_mvec(const InspectOpts& o) {
  const motok::MotionField f = motok::read_mvec(o.file);
  f.validate();
  std::cout << "MVEC " << o.file << "\n  t " << f.t << "  grid " << f.hb << "x" << f.wb
            << "  normalized " << (f.normalized ? "yes" : "no") << "  block " << f.block_size
            << "  search " << f.search_range << "\n";
  const std::vector<std::string> violations = f.range_violations();
  if (violations.empty()) {
    std::cout << "  range violations: none\n";
    return 0;
  }
  for (const std::string& v : violations) std::cout << "  range violation: " << v << "\n";
  return 1;
}

int inspect_sequences(const InspectOpts& o, const char* label) {
  const motok::PipelineConfig cfg = config_or_default(o.config);
  const std::vector<motok::TokenSequence> seqs = read_sequences(o.file, cfg.vocab);
  std::cout << label << " " << o.file << "\n";
  int bad = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    size_t img = 0, img_end = 0, mov = 0, mov_end = 0;
    for (uint32_t id : s.ids) {
      img += id == cfg.vocab.img();
      img_end += id == cfg.vocab.img_end();
      mov += id == cfg.vocab.mov();
      mov_end += id == cfg.vocab.mov_end();
    }
    std::cout << "  sequence " << i << ": " << s.ids.size() << " tokens, " << s.segments.size()
              << " segments, IMG " << img << "/" << img_end << ", MOV " << mov << "/" << mov_end
              << "\n";
    if (const auto viol = motok::validate(s, cfg.vocab)) {
      std::cout << "  sequence " << i << " invalid at position " << viol->position << ": "
                << viol->message << "\n";
      ++bad;
    }
  }
  return bad == 0 ? 0 : 1;
}

int inspect_mtok(const InspectOpts& o) {
  const motok::Snapshot snap = motok::load_snapshot(o.file);
  std::cout << "MTOK " << o.file << "\n";
  if (!snap.config_json.empty()) {
    try {
      const json meta = json::parse(snap.config_json);
      std::cout << "  kind " << meta.value("kind", std::string("?")) << "  step "
                << meta.value("step", int64_t{-1}) << "\n  config keys:";
      for (const auto& item : meta.items()) std::cout << " " << item.key();
      std::cout << "\n";
    } catch (const json::exception&) {
      std::cout << "  config: unreadable JSON\n";
      return 1;
    }
  } else {
    std::cout << "  config: none\n";
  }
  for (const auto& [name, tensor] : snap.tensors) {
    std::cout << "  " << name << " (";
    for (size_t d = 0; d < tensor.shape.size(); ++d) {
      std::cout << (d ? ", " : "") << tensor.shape[d];
    }
    std::cout << ")\n";
  }
  return 0;
}

int cmd_inspect(const InspectOpts& o) {
  int rc = 0;
  const std::string magic = read_magic(o.file);
  if (magic == "RVID") {
    rc = inspect_rvid(o);
  } else if (magic == "MVEC") {
    rc = inspect_mvec(o);
  } else if (magic == "TSEQ") {
    rc = inspect_sequences(o, "TSEQ");
  } else if (magic == "MTOK") {
    rc = inspect_mtok(o);
  } else if (has_ext(o.file, ".jsonl")) {
    rc = inspect_sequences(o, "JSONL");
  } else {
    throw std::invalid_argument("'" + o.file + "' is not an RVID/MVEC/TSEQ/MTOK/JSONL file");
  }
  if (rc == 0) std::cout << "ok\n";
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"video token pipeline tools"};
  app.require_subcommand(1);

  TokenizeOpts tok;
  CLI::App* tokenize = app.add_subcommand("tokenize", "video file to token stream");
  tokenize->add_option("--video", tok.video, "input RVID video")->required()->check(CLI::ExistingFile);
  tokenize->add_option("--out", tok.out, "output stream (.tseq or .jsonl)")->required();
  tokenize->add_option("--ckpt", tok.ckpt, "tokenizer checkpoint")->capture_default_str();
  tokenize->add_option("--config", tok.config, "pipeline config JSON")->envname("MOTOK_CONFIG")->check(CLI::ExistingFile);

  DetokenizeOpts det;
  CLI::App* detokenize = app.add_subcommand("detokenize", "token stream to video file");
  detokenize->add_option("--tokens", det.tokens, "input stream (.tseq or .jsonl)")->required()->check(CLI::ExistingFile);
  detokenize->add_option("--out", det.out, "output RVID video")->required();
  detokenize->add_option("--detok-ckpt", det.detok_ckpt, "detokenizer checkpoint")->capture_default_str();
  detokenize->add_option("--tokenizer-ckpt", det.tokenizer_ckpt, "tokenizer checkpoint")->capture_default_str();
  detokenize->add_option("--delta-t", det.delta_t, "noise constraint depth for chained clips")->capture_default_str();
  detokenize->add_option("--seed", det.seed, "sampling seed")->capture_default_str();
  detokenize->add_option("--config", det.config, "pipeline config JSON")->envname("MOTOK_CONFIG")->check(CLI::ExistingFile);

  TrainOpts tr;
  CLI::App* train = app.add_subcommand("train", "train one pipeline stage");
  train->add_option("--stage", tr.stage, "tokenizer | detok | lm")->required()
      ->check(CLI::IsMember({"tokenizer", "detok", "lm"}));
  train->add_option("--data", tr.data, "directory of training inputs")->required();
  train->add_option("--out", tr.out, "output checkpoint (default <stage>.mtok)");
  train->add_option("--resume", tr.resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  train->add_option("--seed", tr.seed, "override the config seed");
  train->add_option("--max-steps", tr.max_steps, "cap steps executed this run")->capture_default_str();
  train->add_option("--config", tr.config, "pipeline config JSON")->envname("MOTOK_CONFIG")->check(CLI::ExistingFile);

  InspectOpts ins;
  CLI::App* inspect = app.add_subcommand("inspect", "describe and validate an emitted file");
  inspect->add_option("--file", ins.file, "RVID/MVEC/TSEQ/MTOK/JSONL file")->required()->check(CLI::ExistingFile);
  inspect->add_option("--config", ins.config, "pipeline config JSON (for non-default vocabularies)")
      ->envname("MOTOK_CONFIG")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (tokenize->parsed()) return cmd_tokenize(tok);
    if (detokenize->parsed()) return cmd_detokenize(det);
    if (train->parsed()) return cmd_train(tr);
    return cmd_inspect(ins);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
