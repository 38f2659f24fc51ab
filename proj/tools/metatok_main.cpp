#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"

#include "metatok/commands.hpp"
#include "metatok/run_config.hpp"

int main(int argc, char** argv) {
    using namespace metatok;
    const RunConfig defaults;

    CLI::App app{"Meta-token transformer experiments"};
    app.require_subcommand(1);
    std::string config_path;
    std::map<std::string, std::map<std::string, std::string>> overrides;
    std::map<std::string, CLI::App*> subs;
    for (const auto& name : kCommands) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "key=value config file");
        for (const auto& e : defaults.entries())
            sub->add_option("--" + e.key, overrides[name][e.key], e.help + " (default: " + e.value + ")");
        subs[name] = sub;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    for (const auto& [name, sub] : subs) {
        if (!sub->parsed()) continue;
        try {
            RunConfig cfg;
            if (!config_path.empty()) cfg.load_file(config_path);
            for (const auto& e : defaults.entries())
                if (sub->get_option("--" + e.key)->count() > 0) cfg.set(e.key, overrides[name][e.key]);
            const CommandResult r = run_command(name, cfg, std::cout);
            std::cout << "artifacts: " << r.run_dir.string() << "\n";
            return r.passed ? 0 : 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }
    return 1;
}
