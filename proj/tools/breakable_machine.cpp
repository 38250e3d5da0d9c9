#include "bm/codec.hpp"
#include "bm/dataset.hpp"
#include "bm/nn.hpp"
#include "bm/server.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

namespace {

void write_file(const std::filesystem::path& path, const bm::Bytes& bytes) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Smooth colour blobs: cheap stand-ins for camera frames and training images.
bm::RgbImage blob_image(std::mt19937_64& rng, int size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bm::RgbImage img(size, size);
  const double cx = u(rng) * size, cy = u(rng) * size, r = (0.2 + 0.4 * u(rng)) * size;
  const double base[3] = {u(rng), u(rng), u(rng)}, blob[3] = {u(rng), u(rng), u(rng)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double w = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * r * r));
      std::array<std::uint8_t, 3> px;
      for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>(255.0 * ((1 - w) * base[c] + w * blob[c]));
      img.set(x, y, px);
    }
  }
  return img;
}

int make_demo(const std::filesystem::path& out, std::uint64_t seed, const std::vector<std::string>& labels,
              int frames) {
  const bm::Model model = bm::make_tiny_model(seed, labels);
  write_file(out / "model.bmn", bm::save_model(model));
  std::mt19937_64 rng(seed);
  for (const auto& label : labels) {
    for (int i = 0; i < 3; ++i) {
      write_file(out / "dataset" / label / (std::to_string(i) + ".png"), bm::encode_png(blob_image(rng, 64)));
    }
  }
  for (int i = 0; i < frames; ++i) {
    write_file(out / "frames" / ("frame-" + std::to_string(i) + ".jpg"), bm::encode_jpeg(blob_image(rng, 96)));
  }
  // A ready-to-run bm-sim scenario over the frames above.
  std::ofstream scn(out / "classroom.scn");
  scn << "# bm-sim scenario; image paths are relative to this file\n"
      << "teacher\njoin count=4 prefix=student\nchallenge label=" << labels.back() << "\n";
  for (int i = 0; i < frames; ++i) {
    scn << "submit player=student-" << (i % 4 + 1) << " image=frames/frame-" << i << ".jpg\n";
  }
  scn << "pause value=true\npause value=false\nreveal value=2\nheatmap value=true\nconverge\nend\n";
  std::cout << "wrote " << (out / "model.bmn").string() << ", " << labels.size() << " dataset labels and " << frames
            << " frames plus classroom.scn under " << out.string() << "\n";
  return 0;
}

int serve(bm::ServerConfig config, const std::string& model_path, const std::string& dataset_path) {
  auto model = std::make_shared<const bm::Model>(bm::load_model_file(model_path));
  bm::Dataset dataset = bm::Dataset::load(dataset_path);

  // Block termination signals in every thread; the main thread waits for them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  bm::Server server(std::move(config), model, std::move(dataset));
  server.start();
  std::cout << "Breakable Machine is running (" << model->labels().size() << " labels, input "
            << model->input_size() << "x" << model->input_size() << ")\n"
            << "  listening on port " << server.port() << "\n"
            << "  teacher url: " << server.base_url() << "/?role=teacher\n"
            << "  teacher credential: " << server.teacher_credential() << "\n"
            << "  student join url: " << server.join_url() << "\n"
            << "Press Ctrl-C to stop; all session data is discarded on exit." << std::endl;

  int received = 0;
  sigwait(&signals, &received);
  std::cout << "stopping" << std::endl;
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Breakable Machine classroom server"};
  app.require_subcommand(1);

  bm::ServerConfig config;
  std::string model_path, dataset_path, reveal = "hidden";
  std::string log_path = config.log_path.string();
  std::string ui_dir;
  auto* serve_cmd = app.add_subcommand("serve", "Run the game server");
  serve_cmd->add_option("--model", model_path, "BMNet model file")->required();
  serve_cmd->add_option("--dataset", dataset_path, "Training image directory")->required();
  serve_cmd->add_option("--port", config.port, "TCP port (0 picks a free one)")->default_val(8080);
  serve_cmd->add_option("--bind", config.bind, "Local address to listen on")->default_val("0.0.0.0");
  serve_cmd->add_option("--reveal", reveal, "Scores shown on the board: a count or 'hidden'")->default_val("hidden");
  serve_cmd->add_option("--max-players", config.max_players, "Players per session")->default_val(40);
  serve_cmd->add_option("--ui", ui_dir, "Directory with the web UI bundle");
  serve_cmd->add_option("--log", log_path, "Structural event log file")->default_val(log_path);

  std::string demo_out = "demo";
  std::uint64_t seed = 7;
  std::vector<std::string> labels = {"banana", "astronaut", "cat", "teapot"};
  int frames = 8;
  auto* demo_cmd = app.add_subcommand("make-demo", "Write a seeded BMNet-Tiny model, dataset and frames");
  demo_cmd->add_option("--out", demo_out, "Output directory")->default_val(demo_out);
  demo_cmd->add_option("--seed", seed, "Weight and image seed")->default_val(seed);
  demo_cmd->add_option("--labels", labels, "Class labels")->delimiter(',');
  demo_cmd->add_option("--frames", frames, "Number of sample frames")->default_val(frames);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*demo_cmd) return make_demo(demo_out, seed, labels, frames);

    if (reveal != "hidden") {
      try {
        config.reveal = std::stoul(reveal);
      } catch (const std::exception&) {
        std::cerr << "--reveal must be a number or 'hidden'\n";
        return 2;
      }
    }
    config.log_path = log_path;
    if (!ui_dir.empty()) config.ui_dir = ui_dir;
    if (const char* level = std::getenv("BM_LOG_LEVEL")) config.log_level = level;
    return serve(std::move(config), model_path, dataset_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
